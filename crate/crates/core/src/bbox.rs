//! Axis-aligned boxes in normalized `(x1, y1, x2, y2)` coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox([x1, y1, x2, y2])
    }

    pub fn x1(&self) -> f64 {
        self.0[0]
    }
    pub fn y1(&self) -> f64 {
        self.0[1]
    }
    pub fn x2(&self) -> f64 {
        self.0[2]
    }
    pub fn y2(&self) -> f64 {
        self.0[3]
    }

    pub fn width(&self) -> f64 {
        (self.x2() - self.x1()).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2() - self.y1()).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Strictly positive extent on both axes.
    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite()) && self.x1() < self.x2() && self.y1() < self.y2()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate box {:?}", self.0)))
        }
    }

    /// Orders the corners and clips to the unit square; falls back to `fallback`
    /// when nothing of positive area remains.
    pub fn sanitized(&self, fallback: BBox) -> BBox {
        let [a, b, c, d] = self.0.map(|v| v.clamp(0.0, 1.0));
        let out = BBox::new(a.min(c), b.min(d), a.max(c), b.max(d));
        if out.is_valid() {
            out
        } else {
            fallback
        }
    }

    pub fn shifted(&self, delta: &[f64]) -> BBox {
        let mut v = self.0;
        for (c, d) in v.iter_mut().zip(delta) {
            *c += d;
        }
        BBox(v)
    }
}

fn intersection_extent(a: &BBox, b: &BBox) -> (f64, f64) {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    (iw, ih)
}

/// Intersection over union; 0 for disjoint or empty boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (iw, ih) = intersection_extent(a, b);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (hull - union) / hull`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// Generalized IoU and its gradient with respect to the corners of `a`.
///
/// `b` must be a valid box so the union and hull are never empty.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let [ax1, ay1, ax2, ay2] = a.0;
    let [bx1, by1, bx2, by2] = b.0;

    let iw_raw = ax2.min(bx2) - ax1.max(bx1);
    let ih_raw = ay2.min(by2) - ay1.max(by1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;

    let aw_raw = ax2 - ax1;
    let ah_raw = ay2 - ay1;
    let aw = aw_raw.max(0.0);
    let ah = ah_raw.max(0.0);
    let area_a = aw * ah;
    let area_b = b.area();
    let union = area_a + area_b - inter;

    let hw = (ax2.max(bx2) - ax1.min(bx1)).max(0.0);
    let hh = (ay2.max(by2) - ay1.min(by1)).max(0.0);
    let hull = hw * hh;

    if union <= 0.0 || hull <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union + union / hull - 1.0;

    // value = I/U + U/H - 1 with U = A_a + A_b - I.
    let g_inter = 1.0 / union + inter / (union * union) - 1.0 / hull;
    let g_area = -inter / (union * union) + 1.0 / hull;
    let g_hull = -union / (hull * hull);

    let mut grad = [0.0; 4];

    if iw_raw > 0.0 && ih_raw > 0.0 {
        let g_iw = g_inter * ih;
        let g_ih = g_inter * iw;
        if ax2 < bx2 {
            grad[2] += g_iw;
        }
        if ax1 > bx1 {
            grad[0] -= g_iw;
        }
        if ay2 < by2 {
            grad[3] += g_ih;
        }
        if ay1 > by1 {
            grad[1] -= g_ih;
        }
    }

    if aw_raw > 0.0 && ah_raw > 0.0 {
        grad[2] += g_area * ah;
        grad[0] -= g_area * ah;
        grad[3] += g_area * aw;
        grad[1] -= g_area * aw;
    }

    let g_hw = g_hull * hh;
    let g_hh = g_hull * hw;
    if ax2 > bx2 {
        grad[2] += g_hw;
    }
    if ax1 < bx1 {
        grad[0] -= g_hw;
    }
    if ay2 > by2 {
        grad[3] += g_hh;
    }
    if ay1 < by1 {
        grad[1] -= g_hh;
    }

    (value, grad)
}
