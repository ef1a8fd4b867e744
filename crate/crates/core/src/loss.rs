//! Set-prediction loss: per-layer Hungarian matching, sigmoid focal
//! classification loss, L1 and GIoU box losses, summed over decoder layers.
//!
//! Every term is divided by the number of ground-truth boxes in the batch
//! (at least 1). The per-class weight `α_c` scales both the positive and the
//! negative focal terms of class `c`.

use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{areas, to_xyxy, BoxSet, Cxcywh};
use crate::config::{AlphaKeyword, AlphaSpec, LossConfig};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::matching::{hungarian_match, MatchResult};
use crate::math;
use crate::tensor::Tensor;
use crate::transformer::{DecoderOutput, LayerPrediction};

/// Per-class focal weights from training-set box counts:
/// `α_i ∝ 1 − count_i / Σ counts`, rescaled to mean 1.
pub fn resolve_alpha(setting: &AlphaSpec, counts: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    match setting {
        AlphaSpec::Explicit(v) => {
            if v.len() != num_classes {
                bail!(Config, "loss.alpha has {} entries for {num_classes} classes", v.len());
            }
            if v.iter().any(|a| !a.is_finite() || *a < 0.0) {
                bail!(Config, "loss.alpha entries must be finite and non-negative");
            }
            Ok(v.clone())
        }
        AlphaSpec::Keyword(AlphaKeyword::Uniform) => Ok(vec![1.0; num_classes]),
        AlphaSpec::Keyword(AlphaKeyword::Auto) => {
            if counts.len() != num_classes {
                bail!(Config, "{} class counts for {num_classes} classes", counts.len());
            }
            let total: usize = counts.iter().sum();
            if total == 0 {
                return Ok(vec![1.0; num_classes]);
            }
            let raw: Vec<f64> = counts.iter().map(|&c| 1.0 - c as f64 / total as f64).collect();
            let mean = raw.iter().sum::<f64>() / num_classes as f64;
            if mean <= 0.0 {
                return Ok(vec![1.0; num_classes]);
            }
            Ok(raw.iter().map(|a| a / mean).collect())
        }
    }
}

/// Focal loss of one logit and its gradient. `positive` selects the target.
fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = math::sigmoid(x);
    if positive {
        // −ln p = softplus(−x)
        let s = math::softplus(-x);
        let m = math::pow_nonneg(1.0 - p, gamma);
        (alpha * m * s, -alpha * m * (gamma * p * s + (1.0 - p)))
    } else {
        let s = math::softplus(x);
        let m = math::pow_nonneg(p, gamma);
        (alpha * m * s, alpha * m * (gamma * (1.0 - p) * s + p))
    }
}

/// `Σ_{q,c} FL(logit_qc, [target_q = c])`, unnormalized. `targets[q]` is the
/// matched class of query `q` or `None` for background.
pub fn focal_loss(logits: &Tensor, targets: &[Option<usize>], alpha: &[f64], gamma: f64) -> Result<f64> {
    let (q, c) = logits.dims2()?;
    check_focal(q, c, targets, alpha)?;
    let mut total = 0.0;
    for (qi, t) in targets.iter().enumerate() {
        for ci in 0..c {
            total += focal_term(logits.data()[qi * c + ci], *t == Some(ci), alpha[ci], gamma).0;
        }
    }
    Ok(total)
}

fn check_focal(q: usize, c: usize, targets: &[Option<usize>], alpha: &[f64]) -> Result<()> {
    if alpha.len() != c {
        bail!(Config, "alpha has {} entries for {c} classes", alpha.len());
    }
    if targets.len() != q {
        bail!(Shape, "{} targets for {q} queries", targets.len());
    }
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
        bail!(Validation, "target class {bad} out of {c}");
    }
    Ok(())
}

/// `1 − GIoU(pred, gt)` and its gradient in `pred`'s `(cx, cy, w, h)`.
fn giou_loss_grad(pred: Cxcywh, gt: Cxcywh) -> (f64, [f64; 4]) {
    let a = to_xyxy(pred);
    let b = to_xyxy(gt);
    let (inter, union, enc) = areas(a, b);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let (pw, ph) = (a[2] - a[0], a[3] - a[1]);
    let loss = 2.0 - inter / union - union / enc;
    // derivatives with respect to x1, y1, x2, y2 of the predicted box
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if a[0] > b[0] {
            d_inter[0] = -ih;
        }
        if a[2] < b[2] {
            d_inter[2] = ih;
        }
        if a[1] > b[1] {
            d_inter[1] = -iw;
        }
        if a[3] < b[3] {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ph, -pw, ph, pw];
    let mut d_enc = [0.0; 4];
    if a[0] < b[0] {
        d_enc[0] = -eh;
    }
    if a[2] > b[2] {
        d_enc[2] = eh;
    }
    if a[1] < b[1] {
        d_enc[1] = -ew;
    }
    if a[3] > b[3] {
        d_enc[3] = ew;
    }
    let mut d = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enc - union * d_enc[k]) / (enc * enc);
        d[k] = -d_iou - d_ratio;
    }
    // x1 = cx − w/2, x2 = cx + w/2
    let grad = [d[0] + d[2], d[1] + d[3], 0.5 * (d[2] - d[0]), 0.5 * (d[3] - d[1])];
    (loss, grad)
}

impl Graph<'_> {
    /// Focal loss of `[Q, C]` logits, scaled by `weight`.
    pub fn focal_loss(&self, logits: &Var, targets: &[Option<usize>], alpha: &[f64], gamma: f64, weight: f64) -> Result<Var> {
        let (q, c) = logits.value().dims2()?;
        check_focal(q, c, targets, alpha)?;
        let mut total = 0.0;
        let mut grad = vec![0.0; q * c];
        for (qi, t) in targets.iter().enumerate() {
            for ci in 0..c {
                let (l, d) = focal_term(logits.value().data()[qi * c + ci], *t == Some(ci), alpha[ci], gamma);
                total += l;
                grad[qi * c + ci] = weight * d;
            }
        }
        let grad = Tensor::from_vec(&[q, c], grad);
        Ok(self.op(Tensor::scalar(weight * total), &[logits], move |g, _| {
            let mut t = grad;
            t.scale_assign(g.item());
            vec![Some(t)]
        }))
    }

    /// `weight · Σ |boxes[q] − gt|` over `(query, gt box)` pairs.
    pub fn l1_box_loss(&self, boxes: &Var, pairs: &[(usize, Cxcywh)], weight: f64) -> Result<Var> {
        let (q, four) = boxes.value().dims2()?;
        if four != 4 {
            bail!(Shape, "boxes must be [Q, 4], got {:?}", boxes.shape());
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; q * 4];
        for &(qi, gt) in pairs {
            if qi >= q {
                bail!(Shape, "query {qi} out of {q}");
            }
            for k in 0..4 {
                let diff = boxes.value().data()[qi * 4 + k] - gt[k];
                total += diff.abs();
                grad[qi * 4 + k] += weight * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
            }
        }
        let grad = Tensor::from_vec(&[q, 4], grad);
        Ok(self.op(Tensor::scalar(weight * total), &[boxes], move |g, _| {
            let mut t = grad;
            t.scale_assign(g.item());
            vec![Some(t)]
        }))
    }

    /// `weight · Σ (1 − GIoU(boxes[q], gt))` over `(query, gt box)` pairs.
    pub fn giou_box_loss(&self, boxes: &Var, pairs: &[(usize, Cxcywh)], weight: f64) -> Result<Var> {
        let (q, four) = boxes.value().dims2()?;
        if four != 4 {
            bail!(Shape, "boxes must be [Q, 4], got {:?}", boxes.shape());
        }
        let mut total = 0.0;
        let mut grad = vec![0.0; q * 4];
        for &(qi, gt) in pairs {
            if qi >= q {
                bail!(Shape, "query {qi} out of {q}");
            }
            let row = boxes.value().row(qi);
            let pred = [row[0], row[1], row[2], row[3]];
            if !(pred[2] > 0.0 && pred[3] > 0.0 && gt[2] > 0.0 && gt[3] > 0.0) {
                bail!(Validation, "GIoU needs positive widths and heights, got {pred:?} and {gt:?}");
            }
            let (l, d) = giou_loss_grad(pred, gt);
            total += l;
            for k in 0..4 {
                grad[qi * 4 + k] += weight * d[k];
            }
        }
        let grad = Tensor::from_vec(&[q, 4], grad);
        Ok(self.op(Tensor::scalar(weight * total), &[boxes], move |g, _| {
            let mut t = grad;
            t.scale_assign(g.item());
            vec![Some(t)]
        }))
    }
}

/// Weighted loss terms of one decoder layer, already normalized;
/// `total = class + l1 + giou`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerLoss {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Layers that contributed, in decoder order.
    pub layers: Vec<LayerLoss>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize(other.layers.len(), LayerLoss::default());
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.class += b.class;
            a.l1 += b.l1;
            a.giou += b.giou;
            a.total += b.total;
        }
        self.total += other.total;
    }
}

/// Matching cost `[Q, G]`: focal-style class cost plus weighted L1 and −GIoU.
pub fn matching_cost(logits: &Tensor, boxes: &Tensor, gt: &BoxSet, alpha: &[f64], config: &LossConfig) -> Result<Tensor> {
    let (q, c) = logits.dims2()?;
    let g = gt.len();
    let mut cost = vec![0.0; q * g];
    for qi in 0..q {
        let row = boxes.row(qi);
        let pred = [row[0], row[1], row[2], row[3]];
        for (gi, (&cls, &b)) in gt.classes.iter().zip(&gt.boxes).enumerate() {
            if cls >= c {
                bail!(Validation, "target class {cls} out of {c}");
            }
            let x = logits.data()[qi * c + cls];
            let pos = focal_term(x, true, alpha[cls], config.gamma).0;
            let neg = focal_term(x, false, alpha[cls], config.gamma).0;
            let l1: f64 = pred.iter().zip(&b).map(|(a, b)| (a - b).abs()).sum();
            let giou = 1.0 - giou_loss_grad(pred, b).0;
            cost[qi * g + gi] = config.class_weight * (pos - neg) + config.l1_weight * l1 - config.giou_weight * giou;
        }
    }
    Ok(Tensor::from_vec(&[q, g], cost))
}

/// Loss of one layer against one image. Returns the differentiable total,
/// the weighted terms and the matching used.
pub fn layer_loss(
    g: &Graph<'_>,
    pred: &LayerPrediction,
    gt: &BoxSet,
    alpha: &[f64],
    config: &LossConfig,
    num_boxes: f64,
) -> Result<(Var, LayerLoss, MatchResult)> {
    let norm = 1.0 / num_boxes.max(1.0);
    let cost = matching_cost(pred.logits.value(), pred.boxes.value(), gt, alpha, config)?;
    let m = hungarian_match(&cost)?;
    let q = pred.logits.shape()[0];
    let mut targets = vec![None; q];
    let mut pairs = Vec::with_capacity(gt.len());
    for (gi, &qi) in m.query_of.iter().enumerate() {
        targets[qi] = Some(gt.classes[gi]);
        pairs.push((qi, gt.boxes[gi]));
    }
    let class = g.focal_loss(&pred.logits, &targets, alpha, config.gamma, config.class_weight * norm)?;
    let mut parts = vec![class];
    let mut out = LayerLoss {
        class: parts[0].value().item(),
        ..LayerLoss::default()
    };
    if config.l1.is_on() {
        let l1 = g.l1_box_loss(&pred.boxes, &pairs, config.l1_weight * norm)?;
        out.l1 = l1.value().item();
        parts.push(l1);
    }
    if config.giou.is_on() {
        let gi = g.giou_box_loss(&pred.boxes, &pairs, config.giou_weight * norm)?;
        out.giou = gi.value().item();
        parts.push(gi);
    }
    let refs: Vec<&Var> = parts.iter().collect();
    let total = g.add_scalars(&refs);
    out.total = total.value().item();
    Ok((total, out, m))
}

/// Loss of every decoder layer (only the last when `aux` is off) for one
/// image. `num_boxes` is the ground-truth count of the whole batch.
pub fn joint_loss(
    g: &Graph<'_>,
    outputs: &DecoderOutput,
    gt: &BoxSet,
    alpha: &[f64],
    config: &LossConfig,
    num_boxes: f64,
) -> Result<(Var, LossBreakdown)> {
    let n = outputs.layers.len();
    let first = if config.aux.is_on() { 0 } else { n - 1 };
    let mut vars = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for pred in &outputs.layers[first..] {
        let (v, l, _) = layer_loss(g, pred, gt, alpha, config, num_boxes)?;
        breakdown.total += l.total;
        breakdown.layers.push(l);
        vars.push(v);
    }
    let refs: Vec<&Var> = vars.iter().collect();
    Ok((g.add_scalars(&refs), breakdown))
}

#[cfg(test)]
mod tests;
