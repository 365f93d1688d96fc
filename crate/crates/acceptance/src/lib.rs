//! Support for the acceptance run: one PASS/FAIL line per criterion, the
//! published comparison rows, and the location of the built CLI.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

pub fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Writes straight to the process stdout so the lines survive output capture.
pub fn report(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| outcome(false, "panicked"));
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs());
    let line = format!("{verdict} [{id:>2}] {name}: {} ({timing}{})\n", out.detail, if in_time { "" } else { ", too slow" });
    let mut stdout = std::io::stdout();
    stdout.write_all(line.as_bytes()).unwrap();
    stdout.flush().unwrap();
    pass
}

/// The `comicnet` binary built alongside this test executable.
pub fn comicnet_binary() -> PathBuf {
    let exe = std::env::current_exe().expect("test executable path");
    let dir = exe.parent().and_then(|deps| deps.parent()).expect("target directory");
    let bin = dir.join(format!("comicnet{}", std::env::consts::EXE_SUFFIX));
    assert!(bin.exists(), "{} not built; run through `cargo test --workspace`", bin.display());
    bin
}

/// (task, method, dataset, precision, recall, printed F-measure), all in %.
#[rustfmt::skip]
pub const PUBLISHED: &[(&str, &str, &str, f64, f64, f64)] = &[
    ("panel", "Rigaud", "eBDtheque", 63.0, 69.0, 66.0),
    ("panel", "Rigaud", "Manga109", 70.10, 68.20, 69.13),
    ("panel", "Rigaud", "DCM", 59.70, 64.71, 62.11),
    ("panel", "Rigaud", "BCBId", 56.0, 52.0, 53.92),
    ("panel", "Wang", "eBDtheque", 84.0, 70.0, 76.0),
    ("panel", "Wang", "Manga109", 82.0, 80.51, 81.24),
    ("panel", "Wang", "DCM", 77.22, 79.14, 78.13),
    ("panel", "Wang", "BCBId", 77.0, 63.0, 67.63),
    ("panel", "Pang", "eBDtheque", 74.0, 73.0, 73.49),
    ("panel", "Pang", "Manga109", 90.14, 92.56, 91.35),
    ("panel", "Pang", "DCM", 73.0, 75.28, 74.08),
    ("panel", "Pang", "BCBId", 70.0, 69.0, 64.61),
    ("panel", "YOLO", "eBDtheque", 78.28, 76.35, 77.28),
    ("panel", "YOLO", "Manga109", 85.67, 83.25, 84.38),
    ("panel", "YOLO", "DCM", 80.98, 73.82, 77.14),
    ("panel", "YOLO", "BCBId", 72.34, 75.97, 74.05),
    ("panel", "YOLO9000", "eBDtheque", 85.37, 84.76, 85.0),
    ("panel", "YOLO9000", "Manga109", 90.26, 87.83, 89.0),
    ("panel", "YOLO9000", "DCM", 84.35, 82.17, 83.12),
    ("panel", "YOLO9000", "BCBId", 79.62, 78.95, 79.26),
    ("panel", "softmax head", "eBDtheque", 92.74, 93.28, 93.0),
    ("panel", "softmax head", "Manga109", 90.86, 91.14, 91.0),
    ("panel", "softmax head", "DCM", 93.52, 94.37, 93.85),
    ("panel", "softmax head", "BCBId", 92.91, 94.10, 93.42),
    ("panel", "sigmoid head", "eBDtheque", 97.0, 98.0, 97.49),
    ("panel", "sigmoid head", "Manga109", 98.76, 97.25, 97.92),
    ("panel", "sigmoid head", "DCM", 98.28, 97.55, 97.89),
    ("panel", "sigmoid head", "BCBId", 98.55, 98.0, 98.24),
    ("character", "Rigaud", "eBDtheque", 21.57, 40.52, 28.16),
    ("character", "Rigaud", "Manga109", 19.14, 23.20, 21.0),
    ("character", "Rigaud", "DCM", 28.32, 25.65, 26.80),
    ("character", "Rigaud", "BCBId", 17.0, 35.0, 22.84),
    ("character", "Sun", "eBDtheque", 79.43, 35.48, 49.05),
    ("character", "Sun", "Manga109", 65.20, 70.70, 67.85),
    ("character", "Sun", "DCM", 71.22, 63.0, 66.82),
    ("character", "Sun", "BCBId", 62.0, 56.0, 58.84),
    ("character", "Qin softmax", "eBDtheque", 70.92, 48.41, 57.50),
    ("character", "Qin softmax", "Manga109", 72.71, 65.23, 68.70),
    ("character", "Qin softmax", "DCM", 69.14, 72.32, 70.65),
    ("character", "Qin softmax", "BCBId", 67.0, 69.26, 68.08),
    ("character", "Qin sigmoid", "eBDtheque", 75.25, 49.85, 60.10),
    ("character", "Qin sigmoid", "Manga109", 75.62, 72.34, 74.0),
    ("character", "Qin sigmoid", "DCM", 76.92, 74.83, 75.85),
    ("character", "Qin sigmoid", "BCBId", 71.0, 69.55, 70.24),
    ("character", "Nguyen", "eBDtheque", 79.73, 51.0, 62.11),
    ("character", "Nguyen", "Manga109", 82.78, 80.92, 81.70),
    ("character", "Nguyen", "DCM", 80.92, 77.85, 79.32),
    ("character", "Nguyen", "BCBId", 70.11, 68.53, 69.24),
    ("character", "YOLO", "eBDtheque", 60.71, 52.76, 56.44),
    ("character", "YOLO", "Manga109", 35.38, 32.92, 34.56),
    ("character", "YOLO", "DCM", 77.23, 69.14, 73.0),
    ("character", "YOLO", "BCBId", 40.92, 35.63, 38.15),
    ("character", "YOLO9000", "eBDtheque", 79.73, 55.0, 65.19),
    ("character", "YOLO9000", "Manga109", 46.94, 42.74, 44.70),
    ("character", "YOLO9000", "DCM", 82.3, 77.37, 79.74),
    ("character", "YOLO9000", "BCBId", 69.26, 71.92, 70.56),
    ("character", "softmax head", "eBDtheque", 91.23, 90.56, 90.82),
    ("character", "softmax head", "Manga109", 92.34, 93.76, 93.11),
    ("character", "softmax head", "DCM", 90.55, 91.92, 91.14),
    ("character", "softmax head", "BCBId", 93.14, 89.91, 91.41),
    ("character", "sigmoid head", "eBDtheque", 98.52, 97.0, 97.74),
    ("character", "sigmoid head", "Manga109", 99.14, 98.71, 98.82),
    ("character", "sigmoid head", "DCM", 98.71, 98.23, 98.41),
    ("character", "sigmoid head", "BCBId", 99.0, 98.55, 98.74),
];
