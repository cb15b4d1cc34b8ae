//! Box math and the anatomical detection loss.
//!
//! Queries are assigned to regions by index, so there is no matching step:
//! prediction `k` is always compared with the target box of region `k`.

use serde::{Deserialize, Serialize};

use crate::corpus::BBox;
use crate::error::{Error, Result};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (enclosure - union) / enclosure`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosure = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    // The enclosure covers the union, so the penalty is never negative; the
    // clamp only absorbs rounding when one box contains the other.
    inter / union - ((enclosure - union) / enclosure).max(0.0)
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// GIoU of `a` against `b` and its gradient with respect to `a`'s corners.
///
/// At ties between `a` and `b` coordinates the subgradient attributes the
/// extremum to `a`.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let aw = a.x2 - a.x1;
    let ah = a.y2 - a.y1;
    let area_a = aw * ah;
    let area_b = b.area();
    // d area_a / d (x1, y1, x2, y2)
    let d_area_a = [-ah, -aw, ah, aw];

    let ix1_from_a = a.x1 >= b.x1;
    let iy1_from_a = a.y1 >= b.y1;
    let ix2_from_a = a.x2 <= b.x2;
    let iy2_from_a = a.y2 <= b.y2;
    let iw_raw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih_raw = a.y2.min(b.y2) - a.y1.max(b.y1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let mut d_iw = [0.0; 4];
    let mut d_ih = [0.0; 4];
    if iw_raw > 0.0 {
        if ix1_from_a {
            d_iw[0] = -1.0;
        }
        if ix2_from_a {
            d_iw[2] = 1.0;
        }
    }
    if ih_raw > 0.0 {
        if iy1_from_a {
            d_ih[1] = -1.0;
        }
        if iy2_from_a {
            d_ih[3] = 1.0;
        }
    }

    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enc = ew * eh;
    let mut d_ew = [0.0; 4];
    let mut d_eh = [0.0; 4];
    if a.x1 <= b.x1 {
        d_ew[0] = -1.0;
    }
    if a.x2 >= b.x2 {
        d_ew[2] = 1.0;
    }
    if a.y1 <= b.y1 {
        d_eh[1] = -1.0;
    }
    if a.y2 >= b.y2 {
        d_eh[3] = 1.0;
    }

    let union = area_a + area_b - inter;
    let value = inter / union - ((enc - union) / enc).max(0.0);

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area_a[k] - d_inter;
        let d_enc = d_ew[k] * eh + ew * d_eh[k];
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enc - union * d_enc) / (enc * enc);
        grad[k] = d_iou + d_ratio;
    }
    (value, grad)
}

/// Center-size form `(cx, cy, w, h)` to corners.
pub fn center_to_corners(c: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = c;
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn corners_to_center(c: [f64; 4]) -> [f64; 4] {
    let [x1, y1, x2, y2] = c;
    [0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1]
}

/// Chains a gradient w.r.t. corners back to center-size coordinates.
pub fn corners_grad_to_center(g: [f64; 4]) -> [f64; 4] {
    let [g1, g2, g3, g4] = g;
    [g1 + g3, g2 + g4, 0.5 * (g3 - g1), 0.5 * (g4 - g2)]
}

/// Chains a gradient w.r.t. center-size coordinates back to corners.
fn center_grad_to_corners(g: [f64; 4]) -> [f64; 4] {
    let [gcx, gcy, gw, gh] = g;
    [0.5 * gcx - gw, 0.5 * gcy - gh, 0.5 * gcx + gw, 0.5 * gcy + gh]
}

/// Parameterization the L1 term is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Form {
    #[default]
    Corner,
    CenterSize,
}

/// One box per anatomy query plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub boxes: Vec<BBox>,
    pub valid: Vec<bool>,
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>, valid: Vec<bool>) -> Result<Self> {
        if boxes.len() != valid.len() {
            return Err(Error::Shape(format!(
                "{} boxes but mask of length {}",
                boxes.len(),
                valid.len()
            )));
        }
        Ok(Self { boxes, valid })
    }

    /// Targets from a study's optional region boxes; missing regions are masked
    /// out and filled with a placeholder box.
    pub fn from_optional(regions: &[Option<BBox>]) -> Self {
        let placeholder = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        Self {
            boxes: regions.iter().map(|b| b.unwrap_or(placeholder)).collect(),
            valid: regions.iter().map(Option::is_some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossConfig {
    /// Weight of the L1 term relative to the GIoU term.
    pub alpha: f64,
    pub l1_form: L1Form,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            l1_form: L1Form::Corner,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub value: f64,
    /// Gradient w.r.t. each predicted box's corners; zero for masked entries.
    pub grad: Vec<[f64; 4]>,
}

/// Mean over valid queries of `(1 - giou) + alpha * L1`.
///
/// The prediction set's mask is ignored beyond the equality check; the
/// target mask decides which entries count.
pub fn detection_loss(pred: &BoxSet, target: &BoxSet, alpha: f64) -> Result<DetectionLoss> {
    detection_loss_with(
        pred,
        target,
        &DetectionLossConfig {
            alpha,
            l1_form: L1Form::Corner,
        },
    )
}

pub fn detection_loss_with(
    pred: &BoxSet,
    target: &BoxSet,
    config: &DetectionLossConfig,
) -> Result<DetectionLoss> {
    if pred.valid != target.valid {
        return Err(Error::Shape("prediction and target masks differ".into()));
    }
    if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be >= 0, got {}", config.alpha)));
    }
    let count = target.num_valid();
    if count == 0 {
        return Err(Error::EmptyInput("no valid boxes for the detection loss".into()));
    }
    let scale = 1.0 / count as f64;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 4]; pred.len()];
    for k in 0..pred.len() {
        if !target.valid[k] {
            continue;
        }
        let p = &pred.boxes[k];
        let t = &target.boxes[k];
        let (g, dg) = giou_with_grad(p, t);
        let (l1, dl1) = l1_with_grad(p.to_array(), t.to_array(), config.l1_form);
        value += (1.0 - g) + config.alpha * l1;
        for c in 0..4 {
            grad[k][c] = scale * (-dg[c] + config.alpha * dl1[c]);
        }
    }
    Ok(DetectionLoss {
        value: value * scale,
        grad,
    })
}

fn l1_with_grad(pred: [f64; 4], target: [f64; 4], form: L1Form) -> (f64, [f64; 4]) {
    let (p, t) = match form {
        L1Form::Corner => (pred, target),
        L1Form::CenterSize => (corners_to_center(pred), corners_to_center(target)),
    };
    let mut value = 0.0;
    let mut g = [0.0; 4];
    for c in 0..4 {
        let d = p[c] - t[c];
        value += d.abs();
        g[c] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    let g = match form {
        L1Form::Corner => g,
        L1Form::CenterSize => center_grad_to_corners(g),
    };
    (value, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.1, 0.2, 0.5, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 0.25, 0.25), &b(0.5, 0.5, 0.75, 0.75)), 0.0);
        let v = iou(&b(0.0, 0.0, 0.5, 0.5), &b(0.25, 0.25, 0.75, 0.75));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = b(0.1, 0.2, 0.5, 0.6);
        assert_eq!(giou(&a, &a), 1.0);
        let v = giou(&b(0.0, 0.0, 0.25, 0.25), &b(0.5, 0.5, 0.75, 0.75));
        assert!((v + 7.0 / 9.0).abs() < 1e-12);
        let v = giou(&b(0.0, 0.0, 0.5, 0.5), &b(0.25, 0.25, 0.75, 0.75));
        assert!((v + 5.0 / 63.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_zero_at_target() {
        let t = BoxSet::new(vec![b(0.1, 0.2, 0.5, 0.6), b(0.3, 0.3, 0.9, 0.8)], vec![true, true]).unwrap();
        let out = detection_loss(&t, &t, 5.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn shifted_x1_example() {
        let t = b(0.2, 0.2, 0.6, 0.7);
        let p = b(0.3, 0.2, 0.6, 0.7);
        // Prediction is contained in the target: iou = 0.3*0.5 / (0.4*0.5) = 0.75,
        // enclosure equals the union, so giou = 0.75.
        let pred = BoxSet::new(vec![p], vec![true]).unwrap();
        let target = BoxSet::new(vec![t], vec![true]).unwrap();
        let out = detection_loss(&pred, &target, 5.0).unwrap();
        assert!((out.value - (0.25 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_are_ignored() {
        let t = BoxSet::new(vec![b(0.1, 0.1, 0.4, 0.4), b(0.5, 0.5, 0.9, 0.9)], vec![true, false]).unwrap();
        let mut p = t.clone();
        p.boxes[1] = b(0.0, 0.0, 0.1, 0.1);
        let out = detection_loss(&p, &t, 5.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grad[1], [0.0; 4]);
    }

    #[test]
    fn errors() {
        let t = BoxSet::new(vec![b(0.1, 0.1, 0.4, 0.4)], vec![false]).unwrap();
        assert!(matches!(detection_loss(&t, &t, 5.0), Err(Error::EmptyInput(_))));
        let p = BoxSet::new(vec![b(0.1, 0.1, 0.4, 0.4)], vec![true]).unwrap();
        assert!(matches!(detection_loss(&p, &t, 5.0), Err(Error::Shape(_))));
    }

    #[test]
    fn center_conversions_roundtrip() {
        let c = [0.1, 0.2, 0.5, 0.6];
        let back = center_to_corners(corners_to_center(c));
        for k in 0..4 {
            assert!((back[k] - c[k]).abs() < 1e-15);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| {
            let x2 = (x + w * (1.0 - x)).max(x + 1e-3).min(1.0);
            let y2 = (y + h * (1.0 - y)).max(y + 1e-3).min(1.0);
            BBox::new(x, y, x2, y2).unwrap()
        })
    }

    proptest! {
        #[test]
        fn giou_properties(a in arb_box(), c in arb_box()) {
            let g = giou(&a, &c);
            prop_assert!((g - giou(&c, &a)).abs() < 1e-15);
            prop_assert!(g <= iou(&a, &c) + 1e-15);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn translation_invariance(a in arb_box(), c in arb_box(), dx in -0.05..0.05f64, dy in -0.05..0.05f64) {
            // Use dyadic shifts so translated coordinates are exact.
            let dx = (dx * 1024.0).round() / 1024.0;
            let dy = (dy * 1024.0).round() / 1024.0;
            let snap = |v: f64| (v * 1024.0).round() / 1024.0;
            let s = |q: &BBox| BBox::from_corners(snap(q.x1), snap(q.y1), snap(q.x2), snap(q.y2));
            let (a, c) = (s(&a), s(&c));
            prop_assume!(a.x1 < a.x2 && a.y1 < a.y2 && c.x1 < c.x2 && c.y1 < c.y2);
            let t = |q: &BBox| BBox::from_corners(q.x1 + dx, q.y1 + dy, q.x2 + dx, q.y2 + dy);
            prop_assert_eq!(iou(&a, &c), iou(&t(&a), &t(&c)));
            prop_assert_eq!(giou(&a, &c), giou(&t(&a), &t(&c)));
        }

        #[test]
        fn detection_loss_nonnegative(a in arb_box(), c in arb_box(), alpha in 0.0..10.0f64) {
            let p = BoxSet::new(vec![a], vec![true]).unwrap();
            let t = BoxSet::new(vec![c], vec![true]).unwrap();
            let v = detection_loss(&p, &t, alpha).unwrap().value;
            prop_assert!(v >= 0.0);
        }
    }
}
