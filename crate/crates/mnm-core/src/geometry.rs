//! Box algebra shared by the regression losses and the evaluation metrics.
//!
//! All functions are pure and operate on value types; nothing here touches
//! the autodiff graph (the differentiable box losses live in `matchloss`,
//! which reuses these formulas).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): requires x1 < x2 and y1 < y2")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Axis-aligned rectangle in continuous image coordinates. Zero-area boxes
/// are rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1 < x2 && y1 < y2) {
            return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clip to `[0, w] x [0, h]`, keeping at least `min_extent` per side.
    pub fn clip(&self, w: f64, h: f64, min_extent: f64) -> BBox {
        let x1 = self.x1.clamp(0.0, w - min_extent);
        let y1 = self.y1.clamp(0.0, h - min_extent);
        let x2 = self.x2.clamp(x1 + min_extent, w);
        let y2 = self.y2.clamp(y1 + min_extent, h);
        BBox { x1, y1, x2, y2 }
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union, zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union. Lies in (-1, 1].
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = ew * eh;
    inter / union - (enclosing - union) / enclosing
}

/// True when the center of `pred` lies inside `gt`, boundary inclusive.
pub fn center_hit(pred: &BBox, gt: &BBox) -> bool {
    let (cx, cy) = pred.center();
    cx >= gt.x1 && cx <= gt.x2 && cy >= gt.y1 && cy <= gt.y2
}

/// Delta-decoding clamps predicted log-extent growth to this magnitude.
pub const DELTA_EXTENT_CLAMP: f64 = 4.0;

/// Center/size transform with log-scaled extents: (dx, dy, dw, dh).
pub fn encode_delta(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Inverse of [`encode_delta`]. Extent factors are clamped to `e^{±4}` so a
/// wild regression output cannot overflow.
pub fn apply_delta(anchor: &BBox, delta: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let cx = acx + delta[0] * anchor.width();
    let cy = acy + delta[1] * anchor.height();
    let w = anchor.width() * delta[2].clamp(-DELTA_EXTENT_CLAMP, DELTA_EXTENT_CLAMP).exp();
    let h = anchor.height() * delta[3].clamp(-DELTA_EXTENT_CLAMP, DELTA_EXTENT_CLAMP).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn boxes() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(BBox::new(1.0, 3.0, 2.0, 3.0).is_err());
        assert!(BBox::new(2.0, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_manual_overlap() {
        // inter 1, union 7
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn giou_identity_and_separated() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(giou(&a, &a), 1.0);
        // IoU 0, union 2, enclosing 3
        let b = BBox::new(2.0, 0.0, 3.0, 1.0).unwrap();
        assert!((giou(&a, &b) + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn center_hit_cases() {
        let gt = BBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        // concentric
        let inner = BBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert!(center_hit(&inner, &gt));
        // center exactly on gt corner: inclusive
        let corner = BBox::new(4.0, 4.0, 6.0, 6.0).unwrap();
        assert!(center_hit(&corner, &gt));
        // center (12, 12) outside (0,0,5,5)
        let far = BBox::new(10.0, 10.0, 14.0, 14.0).unwrap();
        assert!(!center_hit(&far, &gt));
    }

    #[test]
    fn delta_identity() {
        let a = BBox::new(3.0, 4.0, 10.0, 9.0).unwrap();
        assert_eq!(encode_delta(&a, &a), [0.0, 0.0, 0.0, 0.0]);
        let back = apply_delta(&a, &[0.0; 4]);
        assert!((back.x1 - a.x1).abs() < 1e-12);
        assert!((back.y2 - a.y2).abs() < 1e-12);
    }

    /// Pairs whose extent ratios stay inside the e^{±4} decode clamp, so the
    /// algebraic inverse property is exact.
    fn clamp_safe_pairs() -> impl Strategy<Value = (BBox, BBox)> {
        (boxes(), 0.0..50.0f64, 0.0..50.0f64, 0.05..20.0f64, 0.05..20.0f64).prop_map(
            |(anchor, x, y, rw, rh)| {
                let target =
                    BBox::new(x, y, x + anchor.width() * rw, y + anchor.height() * rh).unwrap();
                (anchor, target)
            },
        )
    }

    proptest! {
        #[test]
        fn delta_round_trip((anchor, target) in clamp_safe_pairs()) {
            let delta = encode_delta(&anchor, &target);
            let back = apply_delta(&anchor, &delta);
            prop_assert!((back.x1 - target.x1).abs() <= 1e-9);
            prop_assert!((back.y1 - target.y1).abs() <= 1e-9);
            prop_assert!((back.x2 - target.x2).abs() <= 1e-9);
            prop_assert!((back.y2 - target.y2).abs() <= 1e-9);
        }

        #[test]
        fn iou_giou_symmetric_and_bounded(a in boxes(), b in boxes()) {
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-12);
            let i = iou(&a, &b);
            let gi = giou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(gi > -1.0 && gi <= 1.0);
            // penalty term is nonnegative
            prop_assert!(gi <= i + 1e-12);
        }

        #[test]
        fn iou_giou_translation_scale_invariant(a in boxes(), b in boxes(),
                                                dx in -20.0..20.0f64, dy in -20.0..20.0f64,
                                                s in 0.1..5.0f64) {
            let shift = |bb: &BBox| BBox::new(
                (bb.x1 + dx) * s, (bb.y1 + dy) * s,
                (bb.x2 + dx) * s, (bb.y2 + dy) * s,
            ).unwrap();
            prop_assert!((iou(&a, &b) - iou(&shift(&a), &shift(&b))).abs() < 1e-9);
            prop_assert!((giou(&a, &b) - giou(&shift(&a), &shift(&b))).abs() < 1e-9);
        }

        #[test]
        fn center_hit_depends_only_on_center(pred in boxes(), gt in boxes(),
                                             grow in 0.1..3.0f64) {
            let (cx, cy) = pred.center();
            let resized = BBox::new(
                cx - grow * pred.width() / 2.0, cy - grow * pred.height() / 2.0,
                cx + grow * pred.width() / 2.0, cy + grow * pred.height() / 2.0,
            ).unwrap();
            prop_assert_eq!(center_hit(&pred, &gt), center_hit(&resized, &gt));
        }
    }
}
