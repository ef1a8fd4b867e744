//! Residual bottleneck backbone with one extra stride-2 bottleneck stage.
//!
//! Emits four levels at strides 8, 16, 32 and 64. With the default width of 64
//! the channel counts are 512, 1024, 2048 and 2048. Every stride-2 step uses
//! kernel 3 / padding 1 (or the 7×7 stem with padding 3, or a 1×1 projection),
//! so a level of stride `s` has spatial extent `ceil(H / s) × ceil(W / s)`.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::config::BackboneConfig;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, FrozenBatchNorm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Smallest accepted input side; keeps the stride-64 level non-empty.
pub const MIN_INPUT_SIDE: usize = 64;

/// Strides of the emitted levels.
pub const LEVEL_STRIDES: [usize; 4] = [8, 16, 32, 64];

/// Per-channel normalization applied to `[0, 1]` RGB input.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// A padded batch of normalized images.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// `[B, 3, H, W]`.
    pub pixels: Tensor,
    /// `B·H·W` flags, true on padding.
    pub mask: Vec<bool>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, mask: Vec<bool>) -> Result<Self> {
        let &[b, c, h, w] = pixels.shape() else {
            bail!(Shape, "image batch must be [B, 3, H, W], got {:?}", pixels.shape());
        };
        if c != 3 {
            bail!(Shape, "image batch needs 3 channels, got {c}");
        }
        if mask.len() != b * h * w {
            bail!(Shape, "mask has {} cells for {b} images of {h}x{w}", mask.len());
        }
        Ok(Self { pixels, mask })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W)` of the padded canvas.
    pub fn size(&self) -> (usize, usize) {
        (self.pixels.shape()[2], self.pixels.shape()[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (h, w) = self.size();
        let n = 3 * h * w;
        Tensor::from_vec(&[3, h, w], self.pixels.data()[i * n..(i + 1) * n].to_vec())
    }

    pub fn image_mask(&self, i: usize) -> &[bool] {
        let (h, w) = self.size();
        &self.mask[i * h * w..(i + 1) * h * w]
    }
}

/// One backbone level: `[C, H, W]` features and the padding mask at that stride.
#[derive(Clone, Debug)]
pub struct Level {
    pub map: Var,
    pub mask: Vec<bool>,
    pub stride: usize,
}

impl Level {
    pub fn size(&self) -> (usize, usize) {
        let s = self.map.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub levels: Vec<Level>,
}

/// Extent of the level at `stride` for an input side of `n`.
pub fn level_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Nearest-neighbour downsampling of an `H × W` mask to `h × w`: output cell
/// `(i, j)` reads input cell `(⌊i·H/h⌋, ⌊j·W/w⌋)`.
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let si = (i * h / oh).min(h - 1);
        for j in 0..ow {
            let sj = (j * w / ow).min(w - 1);
            out.push(mask[si * w + sj]);
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        planes: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, rng, &format!("{prefix}.conv1"), in_ch, planes, 1, 1, false, false)?;
        let bn1 = FrozenBatchNorm::new(store, &format!("{prefix}.bn1"), planes)?;
        let conv2 = Conv2d::new(store, rng, &format!("{prefix}.conv2"), planes, planes, 3, stride, false, false)?;
        let bn2 = FrozenBatchNorm::new(store, &format!("{prefix}.bn2"), planes)?;
        // The residual branch starts at zero so each block is initially its shortcut.
        let conv3 = Conv2d::new(store, rng, &format!("{prefix}.conv3"), planes, out_ch, 1, 1, false, true)?;
        let bn3 = FrozenBatchNorm::new(store, &format!("{prefix}.bn3"), out_ch)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            let conv = Conv2d::new(store, rng, &format!("{prefix}.downsample.0"), in_ch, out_ch, 1, stride, false, false)?;
            let bn = FrozenBatchNorm::new(store, &format!("{prefix}.downsample.1"), out_ch)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
        })
    }

    fn forward(&self, g: &Graph<'_>, x: &Var) -> Result<Var> {
        let h = g.relu(&self.bn1.forward(g, &self.conv1.forward(g, x)?)?);
        let h = g.relu(&self.bn2.forward(g, &self.conv2.forward(g, &h)?)?);
        let h = self.bn3.forward(g, &self.conv3.forward(g, &h)?)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(g, &conv.forward(g, x)?)?,
            None => x.clone(),
        };
        Ok(g.relu(&g.add(&h, &shortcut)?))
    }
}

/// Stem + four residual stages + the extra bottleneck stage.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stem_bn: FrozenBatchNorm,
    stages: Vec<Vec<Bottleneck>>,
    extra: Bottleneck,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &BackboneConfig) -> Result<Self> {
        let w = config.width;
        let stem = Conv2d::new(store, rng, "backbone.conv1", 3, w, 7, 2, false, false)?;
        let stem_bn = FrozenBatchNorm::new(store, "backbone.bn1", w)?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = w;
        for (s, &n) in config.blocks.iter().enumerate() {
            let planes = w << s;
            let out_ch = planes * 4;
            let stride = if s == 0 { 1 } else { 2 };
            let blocks = (0..n)
                .map(|b| {
                    Bottleneck::new(
                        store,
                        rng,
                        &format!("backbone.layer{}.{b}", s + 1),
                        if b == 0 { in_ch } else { out_ch },
                        planes,
                        out_ch,
                        if b == 0 { stride } else { 1 },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            in_ch = out_ch;
            stages.push(blocks);
        }
        // 32w -> 8w (1x1) -> 8w (3x3, stride 2) -> 32w (1x1), projection shortcut.
        let extra = Bottleneck::new(store, rng, "backbone.layer5.0", in_ch, 8 * w, in_ch, 2)?;
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            stages,
            extra,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn out_channels(&self) -> [usize; 4] {
        self.config.level_channels()
    }

    /// Features for one normalized `[3, H, W]` image with its padding mask.
    pub fn forward(&self, g: &Graph<'_>, image: &Tensor, mask: &[bool]) -> Result<BackboneOutput> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            bail!(Shape, "backbone expects 3 input channels, got {c}");
        }
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            bail!(Dimension, "input {h}x{w} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}");
        }
        if mask.len() != h * w {
            bail!(Shape, "mask has {} cells for a {h}x{w} image", mask.len());
        }
        if !image.is_finite() {
            bail!(Validation, "input pixels contain non-finite values");
        }
        // Padding is zeroed so its content cannot leak into valid outputs.
        let mut x = image.clone();
        for plane in x.data_mut().chunks_exact_mut(h * w) {
            for (v, &m) in plane.iter_mut().zip(mask) {
                if m {
                    *v = 0.0;
                }
            }
        }
        let x = Var::constant(x);
        let x = g.relu(&self.stem_bn.forward(g, &self.stem.forward(g, &x)?)?);
        let mut x = g.max_pool2d(&x, 3, 2, 1)?;
        let mut maps = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(g, &x)?;
            }
            if s >= 1 {
                maps.push(x.clone());
            }
        }
        maps.push(self.extra.forward(g, &x)?);
        let levels = maps
            .into_iter()
            .zip(LEVEL_STRIDES)
            .map(|(map, stride)| {
                let (lh, lw) = (map.shape()[1], map.shape()[2]);
                let mask = downsample_mask(mask, h, w, lh, lw);
                Level { map, mask, stride }
            })
            .collect();
        Ok(BackboneOutput { levels })
    }

    /// Runs [`Backbone::forward`] over every image of a batch.
    pub fn extract_features(&self, g: &Graph<'_>, batch: &ImageBatch) -> Result<Vec<BackboneOutput>> {
        (0..batch.len())
            .map(|i| self.forward(g, &batch.image(i), batch.image_mask(i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::params::normal;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tiny(width: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = BackboneConfig {
            width,
            blocks: vec![1, 1, 1, 1],
        };
        let net = Backbone::new(&mut store, &mut rng, &config).unwrap();
        (store, net)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        normal(&[3, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn sizes(out: &BackboneOutput) -> Vec<(usize, usize)> {
        out.levels.iter().map(Level::size).collect()
    }

    #[test]
    fn square_input_level_sizes() {
        let (store, net) = tiny(4);
        let g = Graph::inference(&store);
        let out = net.forward(&g, &image(256, 256, 1), &vec![false; 256 * 256]).unwrap();
        assert_eq!(sizes(&out), vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
        let channels: Vec<usize> = out.levels.iter().map(|l| l.map.shape()[0]).collect();
        assert_eq!(channels, vec![32, 64, 128, 128]);
        assert_eq!(out.levels.iter().map(|l| l.stride).collect::<Vec<_>>(), LEVEL_STRIDES);
    }

    #[test]
    fn rectangular_input_rounds_up() {
        let (store, net) = tiny(4);
        let g = Graph::inference(&store);
        let out = net.forward(&g, &image(96, 128, 2), &vec![false; 96 * 128]).unwrap();
        // 96 -> 48 -> 24 -> 12 -> 6 -> 3 -> 2 ; 128 -> 64 -> 32 -> 16 -> 8 -> 4 -> 2
        assert_eq!(sizes(&out), vec![(12, 16), (6, 8), (3, 4), (2, 2)]);
    }

    #[test]
    fn full_width_channel_plan() {
        let config = BackboneConfig::default();
        assert_eq!(config.level_channels(), [512, 1024, 2048, 2048]);
    }

    #[test]
    fn zero_image_is_finite() {
        let (mut store, net) = tiny(4);
        // non-trivial statistics so the stem actually transforms the input
        for (name, p) in store.iter_mut() {
            if name.ends_with("bn1.bias") {
                p.value_mut().data_mut().iter_mut().for_each(|v| *v = 0.1);
            }
        }
        let g = Graph::inference(&store);
        let out = net.forward(&g, &Tensor::zeros(&[3, 64, 64]), &vec![false; 64 * 64]).unwrap();
        assert!(out.levels.iter().all(|l| l.map.value().is_finite()));
    }

    #[test]
    fn rejects_small_and_non_finite_input() {
        let (store, net) = tiny(2);
        let g = Graph::inference(&store);
        let err = net.forward(&g, &Tensor::zeros(&[3, 63, 80]), &vec![false; 63 * 80]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let mut x = Tensor::zeros(&[3, 64, 64]);
        x.data_mut()[5] = f64::NAN;
        let err = net.forward(&g, &x, &vec![false; 64 * 64]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = net.forward(&g, &Tensor::zeros(&[3, 64, 64]), &[false; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let (store, net) = tiny(4);
        let x = image(80, 72, 3);
        let mask = vec![false; 80 * 72];
        let a = net.forward(&Graph::inference(&store), &x, &mask).unwrap();
        let b = net.forward(&Graph::inference(&store), &x, &mask).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.map.value().data(), lb.map.value().data());
        }
    }

    #[test]
    fn padding_content_is_ignored() {
        let (store, net) = tiny(4);
        let (h, w) = (96, 96);
        let mask: Vec<bool> = (0..h * w).map(|i| i % w >= 70 || i / w >= 80).collect();
        let mut zeroed = image(h, w, 4);
        let mut noisy = zeroed.clone();
        let junk = image(h, w, 5);
        for c in 0..3 {
            for i in 0..h * w {
                if mask[i] {
                    zeroed.data_mut()[c * h * w + i] = 0.0;
                    noisy.data_mut()[c * h * w + i] = 100.0 * junk.data()[c * h * w + i];
                }
            }
        }
        let a = net.forward(&Graph::inference(&store), &zeroed, &mask).unwrap();
        let b = net.forward(&Graph::inference(&store), &noisy, &mask).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.map.value().data(), lb.map.value().data());
            assert_eq!(la.mask, lb.mask);
        }
    }

    #[test]
    fn level_masks_follow_nearest_neighbour_rule() {
        let (store, net) = tiny(2);
        let (h, w) = (64, 96);
        let mask: Vec<bool> = (0..h * w).map(|i| i % w >= 40).collect();
        let out = net.forward(&Graph::inference(&store), &image(h, w, 6), &mask).unwrap();
        for l in &out.levels {
            let (lh, lw) = l.size();
            for i in 0..lh {
                for j in 0..lw {
                    assert_eq!(l.mask[i * lw + j], (j * w / lw) >= 40);
                }
            }
        }
    }

    #[test]
    fn downsample_mask_hand_case() {
        // 4x4 with the right two columns padded, down to 2x2
        let m: Vec<bool> = (0..16).map(|i| i % 4 >= 2).collect();
        assert_eq!(downsample_mask(&m, 4, 4, 2, 2), vec![false, true, false, true]);
    }

    #[test]
    fn batch_extracts_each_image() {
        let (store, net) = tiny(2);
        let a = image(64, 64, 8);
        let b = image(64, 64, 9);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let batch = ImageBatch::new(Tensor::from_vec(&[2, 3, 64, 64], data), vec![false; 2 * 64 * 64]).unwrap();
        let g = Graph::inference(&store);
        let outs = net.extract_features(&g, &batch).unwrap();
        assert_eq!(outs.len(), 2);
        let single = net.forward(&g, &b, &vec![false; 64 * 64]).unwrap();
        assert_eq!(outs[1].levels[2].map.value().data(), single.levels[2].map.value().data());
        assert!(ImageBatch::new(Tensor::zeros(&[1, 3, 64, 64]), vec![false; 5]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn level_extent_law(h in 64usize..=512, w in 64usize..=512) {
            let (store, net) = tiny(1);
            let g = Graph::inference(&store);
            let out = net.forward(&g, &Tensor::zeros(&[3, h, w]), &vec![false; h * w]).unwrap();
            for (l, &s) in out.levels.iter().zip(&LEVEL_STRIDES) {
                prop_assert_eq!(l.size(), (level_extent(h, s), level_extent(w, s)));
                prop_assert_eq!(l.mask.len(), l.size().0 * l.size().1);
            }
        }
    }
}
