//! One optimization step over a batch, and batched inference.

use alloc::vec::Vec;

use crate::backbone::ImageBatch;
use crate::boxes::BoxSet;
use crate::config::LossConfig;
use crate::error::{bail, Result};
use crate::eval::{Detection, MAX_DETECTIONS};
use crate::graph::{Graph, Var};
use crate::loss::{joint_loss, LossBreakdown};
use crate::model::{postprocess, Detector};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Summed loss over the batch, normalized by the batch's box count.
pub fn batch_loss(
    g: &Graph<'_>,
    detector: &Detector,
    batch: &ImageBatch,
    targets: &[BoxSet],
    alpha: &[f64],
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if targets.len() != batch.len() {
        bail!(Shape, "{} targets for {} images", targets.len(), batch.len());
    }
    let num_boxes = targets.iter().map(|t| t.len()).sum::<usize>().max(1) as f64;
    let outputs = detector.forward(g, batch)?;
    let mut parts = Vec::with_capacity(outputs.len());
    let mut breakdown = LossBreakdown::default();
    for (out, gt) in outputs.iter().zip(targets) {
        let (l, b) = joint_loss(g, out, gt, alpha, config, num_boxes)?;
        breakdown.accumulate(&b);
        parts.push(l);
    }
    let refs: Vec<&Var> = parts.iter().collect();
    Ok((g.add_scalars(&refs), breakdown))
}

/// Forward, backward, clip and update. A non-finite loss leaves the parameters
/// untouched and returns a validation error.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    detector: &Detector,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &ImageBatch,
    targets: &[BoxSet],
    alpha: &[f64],
    config: &LossConfig,
    lr_scale: f64,
    dropout_seed: u64,
) -> Result<StepReport> {
    let (loss, breakdown, mut grads) = {
        let g = Graph::new(store).with_seed(dropout_seed);
        let (total, breakdown) = batch_loss(&g, detector, batch, targets, alpha, config)?;
        let loss = total.value().item();
        if !loss.is_finite() {
            bail!(Validation, "loss is not finite ({loss})");
        }
        (loss, breakdown, g.backward(&total)?.into_params())
    };
    let grad_norm = clip_global_norm(&mut grads, opt.config.grad_clip);
    opt.update(store, &grads, lr_scale)?;
    Ok(StepReport { loss, breakdown, grad_norm })
}

/// Top detections per image in pixel coordinates of each `(width, height)`.
pub fn predict(detector: &Detector, store: &ParamStore, batch: &ImageBatch, ids: &[u64], sizes: &[(usize, usize)]) -> Result<Vec<Vec<Detection>>> {
    if ids.len() != batch.len() || sizes.len() != batch.len() {
        bail!(Shape, "{} ids and {} sizes for {} images", ids.len(), sizes.len(), batch.len());
    }
    let g = Graph::inference(store);
    let outputs = detector.forward(&g, batch)?;
    outputs
        .iter()
        .zip(ids.iter().zip(sizes))
        .map(|(out, (&id, &(w, h)))| {
            let last = out.last();
            postprocess(last.logits.value(), last.boxes.value(), id, w as f64, h as f64, MAX_DETECTIONS)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, OptimConfig};
    use crate::data::batch;
    use crate::synth::make_synthetic;
    use alloc::vec;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig {
            num_classes: 3,
            d_model: 16,
            d_ffn: 32,
            dropout: 0.0,
            num_queries: 8,
            ..ModelConfig::default()
        };
        c.backbone.width = 2;
        c.backbone.blocks = vec![1, 1, 1, 1];
        c.attn.heads = 2;
        c.attn.points = 2;
        c.enc.layers = 1;
        c.dec.layers = 2;
        c
    }

    #[test]
    fn steps_reduce_the_loss_on_one_batch() {
        let data = make_synthetic(0, 2, 3).unwrap();
        let items: Vec<_> = data.iter().map(|(i, a)| (i, a)).collect();
        let (b, t) = batch(&items).unwrap();
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, 0, &tiny()).unwrap();
        let mut opt = AdamW::new(OptimConfig {
            lr_transformer: 1e-3,
            lr_fpn: 1e-3,
            lr_backbone: 1e-3,
            grad_clip: 1.0,
            ..OptimConfig::default()
        });
        let cfg = LossConfig::default();
        let first = train_step(&det, &mut store, &mut opt, &b, &t, &[1.0; 3], &cfg, 1.0, 0).unwrap();
        let mut last = first.loss;
        for s in 1..10 {
            last = train_step(&det, &mut store, &mut opt, &b, &t, &[1.0; 3], &cfg, 1.0, s).unwrap().loss;
        }
        assert!(last < first.loss, "{last} !< {}", first.loss);
        assert!((first.breakdown.total - first.loss).abs() < 1e-9);
        let dets = predict(&det, &store, &b, &[1, 2], &[(256, 256), (256, 256)]).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].len(), 8 * 3);
    }
}
