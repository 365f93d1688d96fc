//! Boxes, labels and the coordinate spaces they live in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square network input, in pixels.
pub const NETWORK_SIZE: u32 = 416;

/// Axis-aligned box in center form. All coordinates are continuous pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { cx: 0.5 * (x_min + x_max), cy: 0.5 * (y_min + y_max), w: x_max - x_min, h: y_max - y_min }
    }

    /// `(x_min, y_min, x_max, y_max)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    fn check(&self) -> Result<()> {
        if self.w > 0.0 && self.h > 0.0 {
            Ok(())
        } else {
            Err(Error::DegenerateBox { w: self.w, h: self.h })
        }
    }

    /// Whether `other` lies entirely inside `self` (edges may touch).
    pub fn contains(&self, other: &BBox) -> bool {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        bx0 >= ax0 && by0 >= ay0 && bx1 <= ax1 && by1 <= ay1
    }

    /// Clip to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clamp_to(&self, space: ImageSpace) -> Option<BBox> {
        let (x0, y0, x1, y1) = self.corners();
        let (w, h) = (f64::from(space.width), f64::from(space.height));
        let b = BBox::from_corners(x0.clamp(0.0, w), y0.clamp(0.0, h), x1.clamp(0.0, w), y1.clamp(0.0, h));
        b.is_valid().then_some(b)
    }
}

/// Intersection over union of two boxes.
///
/// Boxes that share only an edge have zero intersection and an IoU of 0.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two `(w, h)` shapes placed on a common center.
pub fn co_centered_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Panel,
    Character,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Panel, Label::Character];

    pub fn index(self) -> usize {
        match self {
            Label::Panel => 0,
            Label::Character => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Panel => "panel",
            Label::Character => "character",
        }
    }

    /// Parse an annotation label. Accepts the usual spellings used in comic
    /// annotation files; anything else (balloon, text, ...) is `None`.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "panel" | "panels" | "frame" => Some(Label::Panel),
            "character" | "characters" | "person" | "char" => Some(Label::Character),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A box with its class. `score` is `None` for ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl LabeledBox {
    pub fn truth(bbox: BBox, label: Label) -> Self {
        Self { bbox, label, score: None }
    }
}

/// Pixel dimensions of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSpace {
    pub width: u32,
    pub height: u32,
}

impl ImageSpace {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("image space {width}x{height} must be at least 1x1")));
        }
        Ok(Self { width, height })
    }

    pub fn square(side: u32) -> Self {
        Self { width: side.max(1), height: side.max(1) }
    }

    fn scale_to(&self, dst: ImageSpace) -> (f64, f64) {
        (f64::from(dst.width) / f64::from(self.width), f64::from(dst.height) / f64::from(self.height))
    }
}

fn rescale(b: &BBox, sx: f64, sy: f64) -> BBox {
    BBox::new(b.cx * sx, b.cy * sy, b.w * sx, b.h * sy)
}

/// Map a box from image `src` into a `side`x`side` network input (plain
/// per-axis resize, no letterboxing).
pub fn to_network_space_sized(b: &BBox, src: ImageSpace, side: u32) -> BBox {
    let (sx, sy) = src.scale_to(ImageSpace::square(side));
    rescale(b, sx, sy)
}

/// Inverse of [`to_network_space_sized`].
pub fn from_network_space_sized(b: &BBox, dst: ImageSpace, side: u32) -> BBox {
    let (sx, sy) = ImageSpace::square(side).scale_to(dst);
    rescale(b, sx, sy)
}

/// Map a box from image `src` into the 416x416 network space.
pub fn to_network_space(b: &BBox, src: ImageSpace) -> BBox {
    to_network_space_sized(b, src, NETWORK_SIZE)
}

/// Map a box from the 416x416 network space back into image `dst`.
pub fn from_network_space(b: &BBox, dst: ImageSpace) -> BBox {
    from_network_space_sized(b, dst, NETWORK_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Count unit pixels covered by each rectangle on a `canvas`x`canvas` grid.
    fn raster_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32), canvas: i32) -> f64 {
        let inside = |r: (i32, i32, i32, i32), x: i32, y: i32| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..canvas {
            for x in 0..canvas {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(100.0, 100.0, 10.0, 10.0)).unwrap(), 0.0);

        let oracle = raster_iou((0, 0, 10, 10), (5, 0, 15, 10), 20);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        let got = iou(&BBox::from_corners(0.0, 0.0, 10.0, 10.0), &BBox::from_corners(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn shared_edge_is_zero() {
        let a = BBox::from_corners(0.0, 0.0, 10.0, 10.0);
        let b = BBox::from_corners(10.0, 0.0, 20.0, 10.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_box_is_an_error() {
        let a = BBox::new(5.0, 5.0, 0.0, 10.0);
        let b = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert!(matches!(iou(&a, &b), Err(Error::DegenerateBox { .. })));
        assert!(iou(&b, &BBox::new(1.0, 1.0, 3.0, -2.0)).is_err());
    }

    #[test]
    fn network_space_examples() {
        let b = BBox::new(100.0, 50.0, 30.0, 40.0);
        assert_eq!(to_network_space(&b, ImageSpace::square(416)), b);
        assert_eq!(from_network_space(&b, ImageSpace::square(416)), b);
        assert_eq!(
            to_network_space(&BBox::new(416.0, 416.0, 416.0, 416.0), ImageSpace::square(832)),
            BBox::new(208.0, 208.0, 208.0, 208.0)
        );

        let sc1400 = ImageSpace::new(2232, 3072).unwrap();
        let up = from_network_space(&BBox::new(208.0, 208.0, 100.0, 100.0), sc1400);
        let expect = BBox::new(1116.0, 1536.0, 100.0 * 2232.0 / 416.0, 100.0 * 3072.0 / 416.0);
        for (g, e) in [(up.cx, expect.cx), (up.cy, expect.cy), (up.w, expect.w), (up.h, expect.h)] {
            assert!((g - e).abs() <= 1e-12 * e.abs());
        }

        let nd980 = ImageSpace::new(1690, 2195).unwrap();
        let gt = BBox::from_corners(112.0, 87.0, 903.0, 1044.0);
        let back = from_network_space(&to_network_space(&gt, nd980), nd980);
        for (g, e) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h)] {
            assert!((g - e).abs() <= 1e-9 * e.abs());
        }
    }

    #[test]
    fn zero_sized_space_is_rejected() {
        assert!(ImageSpace::new(0, 10).is_err());
        assert!(ImageSpace::new(10, 0).is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!(Label::parse("Panel"), Some(Label::Panel));
        assert_eq!(Label::parse(" character "), Some(Label::Character));
        assert_eq!(Label::parse("balloon"), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    fn arb_int_rect() -> impl Strategy<Value = (i32, i32, i32, i32)> {
        (0..500i32, 0..500i32, 4..200i32, 4..200i32)
            .prop_map(|(x, y, w, h)| (x, y, (x + w).min(512), (y + h).min(512)))
            .prop_filter("non-empty", |r| r.2 > r.0 && r.3 > r.1)
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn corner_form_round_trips(b in arb_box()) {
            let (x0, y0, x1, y1) = b.corners();
            let r = BBox::from_corners(x0, y0, x1, y1);
            for (g, e) in [(r.cx, b.cx), (r.cy, b.cy), (r.w, b.w), (r.h, b.h)] {
                prop_assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0));
            }
        }

        #[test]
        fn network_space_round_trips(b in arb_box(), w in 1u32..9000, h in 1u32..9000) {
            let s = ImageSpace::new(w, h).unwrap();
            let r = from_network_space(&to_network_space(&b, s), s);
            for (g, e) in [(r.cx, b.cx), (r.cy, b.cy), (r.w, b.w), (r.h, b.h)] {
                prop_assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0));
            }
        }

        #[test]
        fn iou_agrees_with_pixel_oracle(a in arb_int_rect(), b in arb_int_rect()) {
            let fa = BBox::from_corners(a.0 as f64, a.1 as f64, a.2 as f64, a.3 as f64);
            let fb = BBox::from_corners(b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64);
            let oracle = raster_iou(a, b, 512);
            prop_assert!((iou(&fa, &fb).unwrap() - oracle).abs() <= 0.02);
        }
    }
}
