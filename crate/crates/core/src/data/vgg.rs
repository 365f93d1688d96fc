//! VGG Image Annotator region files (`via_region_data.json` and project
//! files with an `_via_img_metadata` section). Only `rect` regions are used.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde_json::{json, Map, Value};

use super::{AnnotatedPage, PageImage};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSpace, Label, LabeledBox};

/// Region attribute keys searched, in order, for the class name.
const LABEL_KEYS: [&str; 5] = ["label", "class", "type", "name", "category"];

#[derive(Debug, Clone, PartialEq)]
pub struct VggEntry {
    pub filename: String,
    pub file_size: Option<u64>,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseStats {
    /// Regions whose class is not panel or character, by class name.
    pub dropped_labels: BTreeMap<String, usize>,
    /// Non-rectangular regions, by shape name.
    pub dropped_shapes: BTreeMap<String, usize>,
    /// Boxes cut back to the image bounds.
    pub clamped: usize,
    /// Boxes with nothing left inside the image.
    pub outside: usize,
}

impl ParseStats {
    pub fn dropped_label_count(&self) -> usize {
        self.dropped_labels.values().sum()
    }

    pub fn dropped_shape_count(&self) -> usize {
        self.dropped_shapes.values().sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct VggDataset {
    pub pages: Vec<AnnotatedPage>,
    pub stats: ParseStats,
    /// `(filename, message)` for pages that could not be loaded.
    pub page_errors: Vec<(String, String)>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Dataset(format!("annotation schema: {}", msg.into()))
}

fn region_label(attrs: Option<&Value>) -> Option<String> {
    let obj = attrs?.as_object()?;
    for key in LABEL_KEYS {
        match obj.get(key) {
            Some(Value::String(s)) => return Some(s.clone()),
            // Checkbox / dropdown attributes: {"panel": true}.
            Some(Value::Object(m)) => {
                if let Some((k, _)) = m.iter().find(|(_, v)| v.as_bool() == Some(true)) {
                    return Some(k.clone());
                }
            }
            _ => {}
        }
    }
    // Fall back to the only string-valued attribute, if there is exactly one.
    let strings: Vec<&str> = obj.values().filter_map(Value::as_str).collect();
    (strings.len() == 1).then(|| strings[0].to_string())
}

fn number(attrs: &Map<String, Value>, key: &str, file: &str) -> Result<f64> {
    attrs.get(key).and_then(Value::as_f64).ok_or_else(|| schema(format!("{file}: rect region without numeric `{key}`")))
}

fn parse_region(region: &Value, file: &str, stats: &mut ParseStats) -> Result<Option<LabeledBox>> {
    let shape = region
        .get("shape_attributes")
        .and_then(Value::as_object)
        .ok_or_else(|| schema(format!("{file}: region without shape_attributes")))?;
    let shape_name = shape.get("name").and_then(Value::as_str).unwrap_or("<unnamed>");
    if shape_name != "rect" {
        *stats.dropped_shapes.entry(shape_name.to_string()).or_default() += 1;
        return Ok(None);
    }
    let label_text = region_label(region.get("region_attributes"));
    let Some(label) = label_text.as_deref().and_then(Label::parse) else {
        *stats.dropped_labels.entry(label_text.unwrap_or_else(|| "<none>".into())).or_default() += 1;
        return Ok(None);
    };
    let (x, y) = (number(shape, "x", file)?, number(shape, "y", file)?);
    let (w, h) = (number(shape, "width", file)?, number(shape, "height", file)?);
    Ok(Some(LabeledBox::truth(BBox::from_corners(x, y, x + w, y + h), label)))
}

/// Per-image entries, without touching image files. Entries come back in
/// key order of the JSON object.
pub fn parse_vgg_entries(json_text: &str) -> Result<(Vec<VggEntry>, ParseStats)> {
    let root: Value =
        serde_json::from_str(json_text).map_err(|e| Error::Parse { line: e.line(), column: e.column(), msg: e.to_string() })?;
    let root = root.as_object().ok_or_else(|| schema("top level must be an object"))?;
    let images = match root.get("_via_img_metadata") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(schema("_via_img_metadata must be an object")),
        None => root,
    };
    let mut stats = ParseStats::default();
    let mut entries = Vec::with_capacity(images.len());
    for (key, meta) in images {
        if key.starts_with("_via_") {
            continue;
        }
        let filename =
            meta.get("filename").and_then(Value::as_str).ok_or_else(|| schema(format!("entry `{key}` has no filename")))?.to_string();
        let file_size = meta.get("size").and_then(Value::as_u64);
        let regions: Vec<&Value> = match meta.get("regions") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a.iter().collect(),
            Some(Value::Object(m)) => m.values().collect(),
            Some(_) => return Err(schema(format!("{filename}: regions must be a list or an object"))),
        };
        let mut boxes = Vec::new();
        for r in regions {
            if let Some(b) = parse_region(r, &filename, &mut stats)? {
                boxes.push(b);
            }
        }
        entries.push(VggEntry { filename, file_size, boxes });
    }
    Ok((entries, stats))
}

/// Parses annotations and reads each page's dimensions from `image_dir`.
/// Pages whose image cannot be opened are reported in `page_errors` and
/// skipped. Boxes are clipped to the image.
pub fn parse_vgg_annotations(json_text: &str, image_dir: &Path) -> Result<VggDataset> {
    let (entries, stats) = parse_vgg_entries(json_text)?;
    let mut out = VggDataset { stats, ..Default::default() };
    for e in entries {
        let path = image_dir.join(&e.filename);
        let dims = if path.exists() {
            image::image_dimensions(&path).map_err(|err| err.to_string())
        } else {
            Err(format!("missing image {}", path.display()))
        };
        let space = match dims.and_then(|(w, h)| ImageSpace::new(w, h).map_err(|err| err.to_string())) {
            Ok(s) => s,
            Err(msg) => {
                warn!("{}: {msg}", e.filename);
                out.page_errors.push((e.filename.clone(), msg));
                continue;
            }
        };
        let mut gts = Vec::with_capacity(e.boxes.len());
        for b in &e.boxes {
            match b.bbox.clamp_to(space) {
                Some(c) => {
                    if c != b.bbox {
                        out.stats.clamped += 1;
                    }
                    gts.push(LabeledBox::truth(c, b.label));
                }
                None => out.stats.outside += 1,
            }
        }
        out.pages.push(AnnotatedPage { image_id: e.filename, image: PageImage::File(path), space, gts, source_split: None });
    }
    Ok(out)
}

pub fn load_vgg_dataset(annotations: &Path, image_dir: &Path) -> Result<VggDataset> {
    if !annotations.exists() {
        return Err(Error::MissingFile(annotations.to_path_buf()));
    }
    parse_vgg_annotations(&std::fs::read_to_string(annotations)?, image_dir)
}

/// Writes entries in the flat `via_region_data` layout.
pub fn to_vgg_json(entries: &[VggEntry]) -> String {
    let mut root = Map::new();
    for e in entries {
        let regions: Vec<Value> = e
            .boxes
            .iter()
            .map(|b| {
                let (x0, y0, x1, y1) = b.bbox.corners();
                json!({
                    "shape_attributes": {"name": "rect", "x": x0, "y": y0, "width": x1 - x0, "height": y1 - y0},
                    "region_attributes": {"label": b.label.name()},
                })
            })
            .collect();
        let size = e.file_size.map_or(-1, |s| s as i64);
        root.insert(
            format!("{}{}", e.filename, if size >= 0 { size.to_string() } else { String::new() }),
            json!({"filename": e.filename, "size": size, "regions": regions, "file_attributes": {}}),
        );
    }
    serde_json::to_string_pretty(&Value::Object(root)).expect("JSON values always serialize")
}

pub fn entries_from_pages(pages: &[AnnotatedPage]) -> Vec<VggEntry> {
    pages.iter().map(|p| VggEntry { filename: p.image_id.clone(), file_size: None, boxes: p.gts.clone() }).collect()
}
