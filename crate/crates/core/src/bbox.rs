//! Axis-aligned boxes in COCO `[x, y, width, height]` encoding.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An axis-aligned rectangle in pixel units with top-left origin.
///
/// Construction goes through [`BBox::new`], which rejects non-finite values
/// and non-positive extents, so every live `BBox` has a strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite component in [{x}, {y}, {w}, {h}]"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "non-positive extent in [{x}, {y}, {w}, {h}]"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn width(&self) -> f64 {
        self.w
    }

    pub fn height(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// Intersection over union. Symmetric, in `[0, 1]`, and exactly 0 for boxes
/// that share no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        // (x + w) - x need not round back to w
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    // rounding can push the ratio a hair past 1 for near-identical boxes
    (inter / union).min(1.0)
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 4]>::deserialize(deserializer)?;
        BBox::from_array(v).map_err(serde::de::Error::custom)
    }
}
