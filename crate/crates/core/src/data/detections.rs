//! Line-oriented JSON detection records in original image coordinates.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Label, LabeledBox};
use crate::postprocess::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub label: Label,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub objectness: f64,
    pub class_prob: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        let (x_min, y_min, x_max, y_max) = d.bbox.corners();
        Self {
            image_id: image_id.to_string(),
            label: d.label,
            x_min,
            y_min,
            x_max,
            y_max,
            objectness: d.objectness,
            class_prob: d.class_prob,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: BBox::from_corners(self.x_min, self.y_min, self.x_max, self.y_max),
            label: self.label,
            objectness: self.objectness,
            class_prob: self.class_prob,
            slot: None,
        }
    }

    pub fn labeled(&self) -> LabeledBox {
        self.detection().labeled()
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_jsonl(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?), records)
}

/// Reads records, skipping blank lines. Errors carry the 1-based line.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, column: e.column(), msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DetectionRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Detections grouped by image id.
pub fn group_by_image(records: &[DetectionRecord]) -> BTreeMap<String, Vec<Detection>> {
    let mut map: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for r in records {
        map.entry(r.image_id.clone()).or_default().push(r.detection());
    }
    map
}
