//! Box representations and (generalized) IoU.
//!
//! Canonical storage is center form `(cx, cy, w, h)` because the prediction
//! head emits center form; corner form is computed on demand. All values are
//! normalized to the image. Degenerate 0/0 overlaps are pinned to 0 so the
//! downstream losses stay finite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        CenterBox { cx, cy, w, h }
    }

    pub fn to_corner(&self) -> CornerBox {
        CornerBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// Checked conversion; rejects non-finite fields.
    pub fn convert(&self) -> Result<CornerBox> {
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::domain(
                "convert_box",
                format!("non-finite box {self:?}"),
            ));
        }
        Ok(self.to_corner())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_finite(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
    }
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        CornerBox { x1, y1, x2, y2 }
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn convert(&self) -> Result<CenterBox> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(Error::domain(
                "convert_box",
                format!("non-finite box {self:?}"),
            ));
        }
        Ok(self.to_center())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

fn intersection_area(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// IoU of two boxes; 0 when the union has zero area (both degenerate).
pub fn iou(a: &CenterBox, b: &CenterBox) -> f64 {
    let (ca, cb) = (a.to_corner(), b.to_corner());
    let inter = intersection_area(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// GIoU = IoU - (area(C) - area(union)) / area(C), with C the smallest
/// enclosing axis-aligned box; 0 when C itself is degenerate.
pub fn giou(a: &CenterBox, b: &CenterBox) -> f64 {
    let (ca, cb) = (a.to_corner(), b.to_corner());
    let inter = intersection_area(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    let cw = ca.x2.max(cb.x2) - ca.x1.min(cb.x1);
    let ch = ca.y2.max(cb.y2) - ca.y1.min(cb.y1);
    let enclose = cw * ch;
    if enclose <= 0.0 {
        return 0.0;
    }
    let i = if union <= 0.0 { 0.0 } else { inter / union };
    i - (enclose - union) / enclose
}

fn validate_boxes(op: &'static str, boxes: &[CenterBox]) -> Result<()> {
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_finite() {
            return Err(Error::domain(op, format!("box {i} non-finite: {b:?}")));
        }
        if b.w < 0.0 || b.h < 0.0 {
            return Err(Error::domain(op, format!("box {i} has negative size: {b:?}")));
        }
    }
    Ok(())
}

/// Pairwise IoU matrix `[a.len(), b.len()]`.
pub fn iou_pairwise(a: &[CenterBox], b: &[CenterBox]) -> Result<Tensor<f64>> {
    validate_boxes("iou_pairwise", a)?;
    validate_boxes("iou_pairwise", b)?;
    let mut out = Tensor::zeros(&[a.len(), b.len()]);
    for (i, ba) in a.iter().enumerate() {
        for (j, bb) in b.iter().enumerate() {
            out.data_mut()[i * b.len() + j] = iou(ba, bb);
        }
    }
    Ok(out)
}

/// Pairwise GIoU matrix `[a.len(), b.len()]`.
pub fn giou_pairwise(a: &[CenterBox], b: &[CenterBox]) -> Result<Tensor<f64>> {
    validate_boxes("giou_pairwise", a)?;
    validate_boxes("giou_pairwise", b)?;
    let mut out = Tensor::zeros(&[a.len(), b.len()]);
    for (i, ba) in a.iter().enumerate() {
        for (j, bb) in b.iter().enumerate() {
            out.data_mut()[i * b.len() + j] = giou(ba, bb);
        }
    }
    Ok(out)
}

/// L1 distance between center-form parameter vectors.
pub fn l1_center(a: &CenterBox, b: &CenterBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}
