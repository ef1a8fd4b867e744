//! The full detector: backbone, neck, position encoding, encoder and decoder.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, ImageBatch};
use crate::boxes::to_xyxy;
use crate::config::ModelConfig;
use crate::deform_attn::LevelShapes;
use crate::error::{bail, Result};
use crate::eval::Detection;
use crate::graph::{Graph, Var};
use crate::neck::Neck;
use crate::params::ParamStore;
use crate::position::PositionEncoding;
use crate::tensor::Tensor;
use crate::transformer::{valid_ratios, Decoder, DecoderOutput, Encoder};

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub pe: PositionEncoding,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Detector {
    /// Builds every module and registers its parameters in `store`.
    pub fn new(store: &mut ParamStore, seed: u64, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(store, &mut rng, &config.backbone)?;
        let neck = Neck::new(store, &mut rng, backbone.out_channels(), config.d_model, &config.fpn)?;
        let pe = PositionEncoding::new(store, &mut rng, &config.pe, config.d_model, config.attn.levels)?;
        let encoder = Encoder::new(store, &mut rng, config)?;
        let decoder = Decoder::new(store, &mut rng, config)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            neck,
            pe,
            encoder,
            decoder,
        })
    }

    /// One `[3, H, W]` image with its padding mask.
    pub fn forward_image(&self, g: &Graph<'_>, image: &Tensor, mask: &[bool]) -> Result<DecoderOutput> {
        let features = self.backbone.forward(g, image, mask)?;
        let pyramid = self.neck.forward(g, &features)?;
        let mut tokens = Vec::with_capacity(pyramid.levels.len());
        let mut sizes = Vec::with_capacity(pyramid.levels.len());
        let mut padding = Vec::new();
        for level in &pyramid.levels {
            tokens.push(g.map_to_tokens(&level.map)?);
            sizes.push(level.size());
            padding.extend_from_slice(&level.mask);
        }
        let refs: Vec<&Var> = tokens.iter().collect();
        let src = g.concat_rows(&refs)?;
        let shapes = LevelShapes::new(sizes);
        let per_level: Vec<((usize, usize), &[bool])> = pyramid.levels.iter().map(|l| (l.size(), l.mask.as_slice())).collect();
        let pos = self.pe.encode(g, &per_level)?;
        let memory = self.encoder.forward(g, &src, pos.as_ref(), &shapes, &padding)?;
        let ratios = valid_ratios(&shapes, &padding);
        self.decoder.forward(g, &memory, &shapes, &padding, &ratios)
    }

    pub fn forward(&self, g: &Graph<'_>, batch: &ImageBatch) -> Result<Vec<DecoderOutput>> {
        (0..batch.len()).map(|i| self.forward_image(g, &batch.image(i), batch.image_mask(i))).collect()
    }
}

/// The `k` highest class probabilities over all query/class pairs, boxes scaled
/// to a `width × height` image and clipped to it. Equal scores keep the lower
/// flat index first.
pub fn postprocess(logits: &Tensor, boxes: &Tensor, image_id: u64, width: f64, height: f64, k: usize) -> Result<Vec<Detection>> {
    let (q, c) = logits.dims2()?;
    if boxes.shape() != [q, 4] {
        bail!(Shape, "boxes {:?} do not match {q} queries", boxes.shape());
    }
    let probs: Vec<f64> = logits.data().iter().map(|&x| crate::math::sigmoid(x)).collect();
    let mut order: Vec<usize> = (0..q * c).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order
        .into_iter()
        .map(|flat| {
            let (qi, ci) = (flat / c, flat % c);
            let r = boxes.row(qi);
            let b = to_xyxy([r[0], r[1], r[2], r[3]]);
            Detection {
                image_id,
                class: ci,
                bbox: [
                    (b[0] * width).clamp(0.0, width),
                    (b[1] * height).clamp(0.0, height),
                    (b[2] * width).clamp(0.0, width),
                    (b[3] * height).clamp(0.0, height),
                ],
                score: probs[flat],
            }
        })
        .collect())
}
