//! Shared domain types: boxes, detections, affordance maps, dataset samples.
//!
//! Boxes are corner-format `(x1, y1, x2, y2)` in absolute pixels with the
//! origin at the top-left; normalized coordinates appear only in prompt text
//! and file formats.

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

/// Axis-aligned box, corner format, absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Corners ordered (x1 <= x2, y1 <= y2) and every coordinate finite.
    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }
}

/// Intersection over union. Total on valid boxes: disjoint or zero-area
/// inputs give 0.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Clip a box to `[0,width] x [0,height]`. Corner ordering is preserved.
pub fn clamp_box(b: &BBox, width: u32, height: u32) -> BBox {
    let (w, h) = (width as f32, height as f32);
    BBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    }
}

/// Default clamping epsilon for [`logit`]; gate values may saturate at 0/1.
pub const LOGIT_EPS: f64 = 1e-4;

/// ln(p'/(1-p')) with p' = clamp(p, eps, 1-eps). Finite for every input.
pub fn logit(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// A single scored detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

/// Dense per-category affordance heatmap, values in [0,1].
/// Stored as `[A, H, W]` (category-major) to match the compute layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceMap {
    pub values: Array3<f32>,
}

impl AffordanceMap {
    pub fn zeros(categories: usize, height: usize, width: usize) -> Self {
        AffordanceMap {
            values: Array3::zeros((categories, height, width)),
        }
    }

    pub fn categories(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, a: usize) -> ArrayView2<'_, f32> {
        self.values.index_axis(ndarray::Axis(0), a)
    }
}

/// One labeled image: pixels in [0,1] (`[H, W, 3]`), per-object classes and
/// boxes, and ground-truth affordance heatmaps at image resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub affordance: AffordanceMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Structural invariants: parallel class/box lists, boxes inside the
    /// image, heatmap resolution equal to the image resolution.
    pub fn validate(&self) -> crate::Result<()> {
        if self.classes.len() != self.boxes.len() {
            return Err(crate::Error::Data(format!(
                "sample {}: {} classes vs {} boxes",
                self.id,
                self.classes.len(),
                self.boxes.len()
            )));
        }
        let (h, w) = (self.height() as f32, self.width() as f32);
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(crate::Error::Data(format!(
                    "sample {}: box {} [{},{},{},{}] out of bounds {}x{}",
                    self.id, i, b.x1, b.y1, b.x2, b.y2, w, h
                )));
            }
        }
        if self.affordance.height() != self.height() || self.affordance.width() != self.width() {
            return Err(crate::Error::Data(format!(
                "sample {}: heatmap resolution {}x{} != image {}x{}",
                self.id,
                self.affordance.height(),
                self.affordance.width(),
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counting oracle: rasterize both boxes on a fine grid and count cells.
    fn iou_pixel_oracle(a: &BBox, b: &BBox, res: usize) -> f64 {
        let x_lo = a.x1.min(b.x1) as f64;
        let x_hi = a.x2.max(b.x2) as f64;
        let y_lo = a.y1.min(b.y1) as f64;
        let y_hi = a.y2.max(b.y2) as f64;
        let dx = (x_hi - x_lo) / res as f64;
        let dy = (y_hi - y_lo) / res as f64;
        let (mut na, mut nb, mut ni) = (0u64, 0u64, 0u64);
        for i in 0..res {
            for j in 0..res {
                let x = x_lo + (j as f64 + 0.5) * dx;
                let y = y_lo + (i as f64 + 0.5) * dy;
                let in_a =
                    x >= a.x1 as f64 && x < a.x2 as f64 && y >= a.y1 as f64 && y < a.y2 as f64;
                let in_b =
                    x >= b.x1 as f64 && x < b.x2 as f64 && y >= b.y1 as f64 && y < b.y2 as f64;
                na += in_a as u64;
                nb += in_b as u64;
                ni += (in_a && in_b) as u64;
            }
        }
        let nu = na + nb - ni;
        if nu == 0 {
            0.0
        } else {
            ni as f64 / nu as f64
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_matches_pixel_counting_oracle() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let oracle = iou_pixel_oracle(&a, &b, 1200);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-3, "oracle {oracle}");
        assert!((iou(&a, &b) as f64 - 1.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn iou_zero_area_box() {
        let a = BBox::new(5.0, 5.0, 5.0, 5.0);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn clamp_box_examples() {
        let c = clamp_box(&BBox::new(-5.0, -5.0, 20.0, 20.0), 10, 10);
        assert_eq!(c, BBox::new(0.0, 0.0, 10.0, 10.0));
        let u = clamp_box(&BBox::new(2.0, 2.0, 8.0, 8.0), 10, 10);
        assert_eq!(u, BBox::new(2.0, 2.0, 8.0, 8.0));
        let z = clamp_box(&BBox::new(12.0, 12.0, 15.0, 15.0), 10, 10);
        assert_eq!(z, BBox::new(10.0, 10.0, 10.0, 10.0));
        assert_eq!(z.area(), 0.0);
    }

    #[test]
    fn logit_examples() {
        assert_eq!(logit(0.5, LOGIT_EPS), 0.0);
        // scalar evaluation oracle: direct ln(p'/(1-p'))
        assert!((logit(1.0, 1e-4) - (0.9999f64 / 0.0001).ln()).abs() < 1e-12);
        assert!((logit(1.0, 1e-4) - 9.2102).abs() < 1e-4);
        assert!((logit(0.1, 1e-4) - (1.0f64 / 9.0).ln()).abs() < 1e-12);
        assert!((logit(0.1, 1e-4) + 2.1972).abs() < 1e-4);
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    proptest! {
        #[test]
        fn iou_symmetric(ax in -50.0f32..50.0, ay in -50.0f32..50.0,
                         aw in 0.0f32..40.0, ah in 0.0f32..40.0,
                         bx in -50.0f32..50.0, by in -50.0f32..50.0,
                         bw in 0.0f32..40.0, bh in 0.0f32..40.0) {
            let a = BBox::new(ax, ay, ax + aw, ay + ah);
            let b = BBox::new(bx, by, bx + bw, by + bh);
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn iou_self_is_one(x in -50.0f32..50.0, y in -50.0f32..50.0,
                           w in 0.1f32..40.0, h in 0.1f32..40.0) {
            let a = BBox::new(x, y, x + w, y + h);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn logit_inverts_sigmoid(x in -9.0f64..9.0) {
            // |x| <= logit(1-eps) ~ 9.21 for eps=1e-4
            prop_assert!((logit(sigmoid(x), LOGIT_EPS) - x).abs() < 1e-9);
        }

        #[test]
        fn clamp_preserves_ordering(x1 in -30.0f32..30.0, y1 in -30.0f32..30.0,
                                    dx in 0.0f32..30.0, dy in 0.0f32..30.0) {
            let c = clamp_box(&BBox::new(x1, y1, x1 + dx, y1 + dy), 20, 20);
            prop_assert!(c.is_valid());
            prop_assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 20.0 && c.y2 <= 20.0);
        }
    }
}
