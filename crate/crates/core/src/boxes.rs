//! Box geometry. Boxes are `[cx, cy, w, h]` unless a name says `xyxy`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub type Cxcywh = [f64; 4];
pub type Xyxy = [f64; 4];

pub fn to_xyxy(b: Cxcywh) -> Xyxy {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

pub fn to_cxcywh(b: Xyxy) -> Cxcywh {
    [0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]), b[2] - b[0], b[3] - b[1]]
}

fn check(b: &Cxcywh) -> Result<()> {
    if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
        bail!(Validation, "box {b:?} needs finite coordinates and positive width and height");
    }
    Ok(())
}

/// Intersection, union and enclosing areas of two `xyxy` boxes.
pub(crate) fn areas(a: Xyxy, b: Xyxy) -> (f64, f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let enclosing = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    (inter, union, enclosing)
}

/// Intersection over union of two `xyxy` boxes; 0 when both are empty.
pub fn iou_xyxy(a: Xyxy, b: Xyxy) -> f64 {
    let (inter, union, _) = areas(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou(a: Cxcywh, b: Cxcywh) -> Result<f64> {
    check(&a)?;
    check(&b)?;
    Ok(iou_xyxy(to_xyxy(a), to_xyxy(b)))
}

/// Generalized IoU: `IoU − (enclosing − union) / enclosing`, in `(−1, 1]`.
pub fn giou(a: Cxcywh, b: Cxcywh) -> Result<f64> {
    check(&a)?;
    check(&b)?;
    let (inter, union, enclosing) = areas(to_xyxy(a), to_xyxy(b));
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// `λ_giou·(1 − GIoU) + λ_l1·Σ|pred − gt|`.
pub fn box_loss(pred: Cxcywh, gt: Cxcywh, giou_weight: f64, l1_weight: f64) -> Result<f64> {
    let l1: f64 = pred.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum();
    Ok(giou_weight * (1.0 - giou(pred, gt)?) + l1_weight * l1)
}

/// Ground truth of one image: class ids with normalized boxes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub classes: Vec<usize>,
    pub boxes: Vec<Cxcywh>,
}

impl BoxSet {
    pub fn new(classes: Vec<usize>, boxes: Vec<Cxcywh>) -> Result<Self> {
        if classes.len() != boxes.len() {
            bail!(Shape, "{} classes for {} boxes", classes.len(), boxes.len());
        }
        for b in &boxes {
            check(b)?;
        }
        Ok(Self { classes, boxes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn push(&mut self, class: usize, b: Cxcywh) -> Result<()> {
        check(&b)?;
        self.classes.push(class);
        self.boxes.push(b);
        Ok(())
    }
}
