//! Box geometry: normalized center-format boxes, IoU, and GIoU.

use serde::{Deserialize, Serialize};

/// Normalized box in center format `(cx, cy, w, h)`, clamped at construction
/// so it stays inside the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

const MIN_SIDE: f64 = 1e-6;

impl BoxSpec {
    /// Clamp the requested box into the unit square. Width and height are
    /// first clipped to (0, 1], then the center is moved so both edges fit.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let w = w.clamp(MIN_SIDE, 1.0);
        let h = h.clamp(MIN_SIDE, 1.0);
        let cx = cx.clamp(w / 2.0, 1.0 - w / 2.0);
        let cy = cy.clamp(h / 2.0, 1.0 - h / 2.0);
        Self { cx, cy, w, h }
    }

    /// The global box covering the whole unit square.
    pub fn global() -> Self {
        Self {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoxSpec) -> f64 {
        iou_corners(self.corners(), other.corners())
    }
}

/// IoU of two corner-format boxes `(x0, y0, x1, y1)`.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two corner-format boxes: `IoU - |C \ U| / |C|` where
/// C is the smallest enclosing box. Lies in [-1, 1].
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = cw * ch;
    if union <= 0.0 || enclose <= 0.0 {
        return 0.0;
    }
    inter / union - (enclose - union) / enclose
}

/// GIoU on normalized center-format boxes.
pub fn giou(a: &BoxSpec, b: &BoxSpec) -> f64 {
    giou_corners(a.corners(), b.corners())
}

/// GIoU plus its gradient with respect to the *first* box's center-format
/// coordinates `(cx, cy, w, h)`. Branch points (touching edges) take the
/// one-sided derivative of the active branch.
pub fn giou_with_grad(pred: &BoxSpec, gt: &BoxSpec) -> (f64, [f64; 4]) {
    let a = pred.corners();
    let b = gt.corners();

    // d corner / d (cx, cy, w, h) for the pred box:
    // x0 = cx - w/2, y0 = cy - h/2, x1 = cx + w/2, y1 = cy + h/2.
    let ix0 = a[0].max(b[0]);
    let iy0 = a[1].max(b[1]);
    let ix1 = a[2].min(b[2]);
    let iy1 = a[3].min(b[3]);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;

    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;

    let cx0 = a[0].min(b[0]);
    let cy0 = a[1].min(b[1]);
    let cx1 = a[2].max(b[2]);
    let cy1 = a[3].max(b[3]);
    let cw = cx1 - cx0;
    let ch = cy1 - cy0;
    let enclose = cw * ch;

    if union <= 0.0 || enclose <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (enclose - union) / enclose;

    // Gradients of inter/area/enclose w.r.t. pred corners (x0, y0, x1, y1).
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if a[0] > b[0] {
            d_inter[0] = -ih;
        }
        if a[1] > b[1] {
            d_inter[1] = -iw;
        }
        if a[2] < b[2] {
            d_inter[2] = ih;
        }
        if a[3] < b[3] {
            d_inter[3] = iw;
        }
    }
    let d_area = [
        -(a[3] - a[1]),
        -(a[2] - a[0]),
        a[3] - a[1],
        a[2] - a[0],
    ];
    let mut d_enclose = [0.0; 4];
    if a[0] < b[0] {
        d_enclose[0] = -ch;
    }
    if a[1] < b[1] {
        d_enclose[1] = -cw;
    }
    if a[2] > b[2] {
        d_enclose[2] = ch;
    }
    if a[3] > b[3] {
        d_enclose[3] = cw;
    }

    // giou = inter/union + union/enclose - 1, with union = area_a + area_b - inter.
    let mut d_corners = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclose - union * d_enclose[k]) / (enclose * enclose);
        d_corners[k] = d_iou + d_ratio;
    }

    // Chain into center format.
    let grad = [
        d_corners[0] + d_corners[2],
        d_corners[1] + d_corners[3],
        0.5 * (d_corners[2] - d_corners[0]),
        0.5 * (d_corners[3] - d_corners[1]),
    ];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_boxes_giou_one() {
        let b = BoxSpec::new(0.5, 0.5, 0.4, 0.4);
        assert_abs_diff_eq!(giou(&b, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_corner_boxes_hand_value() {
        // IoU 0, union 2, enclosure 3 -> -1/3.
        let g = giou_corners([0.0, 0.0, 1.0, 1.0], [2.0, 0.0, 3.0, 1.0]);
        assert_abs_diff_eq!(g, -1.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn touching_boxes_giou_zero() {
        let g = giou_corners([0.0, 0.0, 1.0, 1.0], [1.0, 0.0, 2.0, 1.0]);
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_is_symmetric() {
        let a = BoxSpec::new(0.3, 0.3, 0.2, 0.4);
        let b = BoxSpec::new(0.7, 0.6, 0.3, 0.2);
        assert_abs_diff_eq!(giou(&a, &b), giou(&b, &a), epsilon = 1e-12);
    }

    #[test]
    fn construction_clamps_into_unit_square() {
        let b = BoxSpec::new(0.05, 0.95, 0.4, 0.4);
        let c = b.corners();
        assert!(c[0] >= 0.0 && c[1] >= 0.0 && c[2] <= 1.0 && c[3] <= 1.0);
        assert_abs_diff_eq!(b.w, 0.4);
        assert_abs_diff_eq!(b.h, 0.4);
    }

    #[test]
    fn giou_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = 1e-6;
        for _ in 0..200 {
            let pred = BoxSpec {
                cx: rng.gen_range(0.2..0.8),
                cy: rng.gen_range(0.2..0.8),
                w: rng.gen_range(0.05..0.35),
                h: rng.gen_range(0.05..0.35),
            };
            let gt = BoxSpec {
                cx: rng.gen_range(0.2..0.8),
                cy: rng.gen_range(0.2..0.8),
                w: rng.gen_range(0.05..0.35),
                h: rng.gen_range(0.05..0.35),
            };
            let (_, grad) = giou_with_grad(&pred, &gt);
            let coords = [pred.cx, pred.cy, pred.w, pred.h];
            for k in 0..4 {
                let perturb = |delta: f64| {
                    let mut c = coords;
                    c[k] += delta;
                    let p = BoxSpec {
                        cx: c[0],
                        cy: c[1],
                        w: c[2],
                        h: c[3],
                    };
                    giou(&p, &gt)
                };
                let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                let diff = (grad[k] - fd).abs();
                let scale = grad[k].abs().max(fd.abs()).max(1e-3);
                assert!(
                    diff / scale < 1e-4,
                    "coord {k}: analytic {} vs fd {fd}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn giou_range_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let a = BoxSpec::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.01..1.0),
                rng.gen_range(0.01..1.0),
            );
            let b = BoxSpec::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.01..1.0),
                rng.gen_range(0.01..1.0),
            );
            let g = giou(&a, &b);
            assert!((-1.0..=1.0).contains(&g));
        }
    }
}
