//! Plain-float box geometry: IoU and generalized IoU.
//!
//! Boxes are center-format (cx, cy, w, h) with non-negative extents. The
//! differentiable box losses in the loss module mirror these formulas in
//! tensor ops; this module is the float ground truth used for matching
//! costs and evaluation.

/// Axis-aligned box, center format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxCxcywh {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// (x1, y1, x2, y2).
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Sum of absolute coordinate differences in center format.
    pub fn l1_distance(&self, other: &BoxCxcywh) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

/// Intersection over union in [0, 1]. Zero-area boxes give 0.
pub fn box_iou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU in [-1, 1]: IoU minus the hull area not covered by the
/// union, normalized by the hull area.
pub fn giou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = (ax2.max(bx2) - ax1.min(bx1)).max(0.0) * (ay2.max(by2) - ay1.min(by1)).max(0.0);
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    #[test]
    fn identical_boxes_score_one() {
        let a = BoxCxcywh::new(0.3, 0.4, 0.2, 0.5);
        assert_relative_eq!(box_iou(&a, &a), 1.0);
        assert_relative_eq!(giou(&a, &a), 1.0);
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        // Side by side, the hull is exactly the union.
        let a = BoxCxcywh::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BoxCxcywh::from_corners(1.0, 0.0, 2.0, 1.0);
        assert_eq!(box_iou(&a, &b), 0.0);
        assert_relative_eq!(giou(&a, &b), 0.0);
    }

    #[test]
    fn overlap_one_third() {
        // Corner coords (0,0,2,2) and (1,0,3,2): intersection 2, union 6.
        let a = BoxCxcywh::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BoxCxcywh::from_corners(1.0, 0.0, 3.0, 2.0);
        assert_relative_eq!(box_iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_area_box_scores_zero() {
        let a = BoxCxcywh::new(0.5, 0.5, 0.0, 0.3);
        let b = BoxCxcywh::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(box_iou(&a, &b), 0.0);
    }

    #[test]
    fn giou_penalizes_distance_between_disjoint_boxes() {
        let a = BoxCxcywh::from_corners(0.0, 0.0, 1.0, 1.0);
        let near = BoxCxcywh::from_corners(1.5, 0.0, 2.5, 1.0);
        let far = BoxCxcywh::from_corners(5.0, 0.0, 6.0, 1.0);
        assert!(giou(&a, &far) < giou(&a, &near));
        assert!(giou(&a, &near) < 0.0);
    }

    #[test]
    fn giou_stays_in_range_and_is_symmetric() {
        let mut rng = Rng::new(3).fork_named("boxes");
        for _ in 0..500 {
            let a = BoxCxcywh::new(
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(0.0, 3.0),
                rng.range(0.0, 3.0),
            );
            let b = BoxCxcywh::new(
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(0.0, 3.0),
                rng.range(0.0, 3.0),
            );
            let g = giou(&a, &b);
            let i = box_iou(&a, &b);
            assert!((-1.0..=1.0).contains(&g), "giou {g}");
            assert!((0.0..=1.0).contains(&i), "iou {i}");
            assert!(g <= i + 1e-12, "giou must not exceed iou");
            assert_relative_eq!(g, giou(&b, &a), epsilon = 1e-12);
            assert_relative_eq!(i, box_iou(&b, &a), epsilon = 1e-12);
        }
    }

    #[test]
    fn corner_round_trip() {
        let a = BoxCxcywh::new(0.3, -0.2, 1.4, 0.8);
        let (x1, y1, x2, y2) = a.corners();
        let back = BoxCxcywh::from_corners(x1, y1, x2, y2);
        assert_relative_eq!(a.cx, back.cx);
        assert_relative_eq!(a.cy, back.cy);
        assert_relative_eq!(a.w, back.w);
        assert_relative_eq!(a.h, back.h);
    }
}
