//! Spatial and scale encodings added to encoder tokens.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::config::{PeConfig, ScaleEncoding, SpatialEncoding};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{uniform, ParamStore};
use crate::tensor::Tensor;

/// Fixed sine encoding of an `h × w` grid, `[h·w, d]`: the first `d/2`
/// columns encode y, the rest x. Coordinates are cumulative counts of unmasked
/// cells normalized by the unmasked extent, so padding does not shift them.
pub fn sine_encoding(h: usize, w: usize, mask: &[bool], d: usize, temperature: f64) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        bail!(Config, "sine encoding needs an even width, got {d}");
    }
    if mask.len() != h * w {
        bail!(Shape, "mask has {} cells for a {h}x{w} grid", mask.len());
    }
    let half = d / 2;
    let mut y_embed = alloc::vec![0.0; h * w];
    let mut x_embed = alloc::vec![0.0; h * w];
    for j in 0..w {
        let mut acc = 0.0;
        for i in 0..h {
            acc += f64::from(!mask[i * w + j] as u8);
            y_embed[i * w + j] = acc;
        }
    }
    for i in 0..h {
        let mut acc = 0.0;
        for j in 0..w {
            acc += f64::from(!mask[i * w + j] as u8);
            x_embed[i * w + j] = acc;
        }
    }
    let two_pi = 2.0 * core::f64::consts::PI;
    let eps = 1e-6;
    for j in 0..w {
        let total = y_embed[(h - 1) * w + j];
        for i in 0..h {
            let v = &mut y_embed[i * w + j];
            *v = (*v - 0.5) / (total + eps) * two_pi;
        }
    }
    for i in 0..h {
        let total = x_embed[i * w + w - 1];
        for j in 0..w {
            let v = &mut x_embed[i * w + j];
            *v = (*v - 0.5) / (total + eps) * two_pi;
        }
    }
    let freqs: Vec<f64> = (0..half)
        .map(|k| math::powf(temperature, (2 * (k / 2)) as f64 / half as f64))
        .collect();
    let mut out = Vec::with_capacity(h * w * d);
    for p in 0..h * w {
        for embed in [y_embed[p], x_embed[p]] {
            for (k, f) in freqs.iter().enumerate() {
                let a = embed / f;
                out.push(if k % 2 == 0 { math::sin(a) } else { math::cos(a) });
            }
        }
    }
    Ok(Tensor::from_vec(&[h * w, d], out))
}

#[derive(Clone, Debug)]
pub struct PositionEncoding {
    config: PeConfig,
    d_model: usize,
    row_embed: Option<String>,
    col_embed: Option<String>,
    level_embed: Option<String>,
}

impl PositionEncoding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: &PeConfig,
        d_model: usize,
        levels: usize,
    ) -> Result<Self> {
        let (row_embed, col_embed) = match config.spatial {
            SpatialEncoding::Learned => {
                let half = d_model / 2;
                let row = String::from("transformer.row_embed");
                let col = String::from("transformer.col_embed");
                store.insert(&row, uniform(&[config.learned_max_len, half], 1.0, rng), true)?;
                store.insert(&col, uniform(&[config.learned_max_len, d_model - half], 1.0, rng), true)?;
                (Some(row), Some(col))
            }
            _ => (None, None),
        };
        let level_embed = match config.scale {
            ScaleEncoding::Learned => {
                let name = String::from("transformer.level_embed");
                store.insert(&name, crate::params::normal(&[levels, d_model], 1.0, rng), true)?;
                Some(name)
            }
            ScaleEncoding::None => None,
        };
        Ok(Self {
            config: config.clone(),
            d_model,
            row_embed,
            col_embed,
            level_embed,
        })
    }

    /// Spatial encoding of one level, `[h·w, d]`, or `None` when disabled.
    pub fn spatial(&self, g: &Graph<'_>, h: usize, w: usize, mask: &[bool]) -> Result<Option<Var>> {
        match self.config.spatial {
            SpatialEncoding::None => Ok(None),
            SpatialEncoding::Sin => Ok(Some(Var::constant(sine_encoding(
                h,
                w,
                mask,
                self.d_model,
                self.config.temperature,
            )?))),
            SpatialEncoding::Learned => {
                let max = self.config.learned_max_len;
                if h > max || w > max {
                    bail!(Config, "level {h}x{w} exceeds pe.learned_max_len = {max}");
                }
                let rows: Vec<usize> = (0..h * w).map(|p| p / w).collect();
                let cols: Vec<usize> = (0..h * w).map(|p| p % w).collect();
                let row = g.gather_rows(&g.param(self.row_embed.as_deref().expect("learned tables"))?, &rows)?;
                let col = g.gather_rows(&g.param(self.col_embed.as_deref().expect("learned tables"))?, &cols)?;
                Ok(Some(g.concat_cols(&row, &col)?))
            }
        }
    }

    /// Scale encoding of level `l` repeated over `n` tokens.
    pub fn scale(&self, g: &Graph<'_>, l: usize, n: usize) -> Result<Option<Var>> {
        match &self.level_embed {
            None => Ok(None),
            Some(name) => Ok(Some(g.gather_rows(&g.param(name)?, &alloc::vec![l; n])?)),
        }
    }

    /// Sum of spatial and scale encodings for every level, stacked to `[N, d]`.
    pub fn encode(&self, g: &Graph<'_>, levels: &[((usize, usize), &[bool])]) -> Result<Option<Var>> {
        let mut parts = Vec::with_capacity(levels.len());
        for (l, &((h, w), mask)) in levels.iter().enumerate() {
            let s = self.spatial(g, h, w, mask)?;
            let c = self.scale(g, l, h * w)?;
            parts.push(match (s, c) {
                (Some(s), Some(c)) => g.add(&s, &c)?,
                (Some(s), None) => s,
                (None, Some(c)) => c,
                (None, None) => return Ok(None),
            });
        }
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(Some(g.concat_rows(&refs)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PeConfig;
    use alloc::vec;
    use rand::SeedableRng;

    #[test]
    fn sine_rows_are_distinct() {
        for (h, w) in [(64, 64), (7, 3), (1, 5)] {
            let t = sine_encoding(h, w, &vec![false; h * w], 32, 10000.0).unwrap();
            for a in 0..h * w {
                for b in a + 1..h * w {
                    let diff = t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(diff > 1e-9, "{h}x{w}: rows {a} and {b} coincide");
                }
            }
        }
    }

    #[test]
    fn sine_hand_values() {
        // 1x2 grid, d = 4: y is constant, x runs 0.5/2 and 1.5/2 of a turn
        let t = sine_encoding(1, 2, &[false, false], 4, 10000.0).unwrap();
        let two_pi = 2.0 * core::f64::consts::PI;
        let y = 0.5 / (1.0 + 1e-6) * two_pi;
        let x1 = 1.5 / (2.0 + 1e-6) * two_pi;
        let expect = [math::sin(y), math::cos(y), math::sin(x1), math::cos(x1)];
        for (a, b) in t.row(1).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_ignores_padding_extent() {
        // a 2x3 content block encodes the same whether or not it is padded to 4x5
        let plain = sine_encoding(2, 3, &[false; 6], 8, 10000.0).unwrap();
        let mask: Vec<bool> = (0..20).map(|p| p / 5 >= 2 || p % 5 >= 3).collect();
        let padded = sine_encoding(4, 5, &mask, 8, 10000.0).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(plain.row(i * 3 + j), padded.row(i * 5 + j));
            }
        }
    }

    #[test]
    fn scale_encoding_separates_levels() {
        let mut store = ParamStore::new();
        let pe = PositionEncoding::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &PeConfig::default(), 8, 2).unwrap();
        let g = Graph::inference(&store);
        let levels: [((usize, usize), &[bool]); 2] = [((2, 2), &[false; 4]), ((2, 2), &[false; 4])];
        let all = pe.encode(&g, &levels).unwrap().unwrap();
        assert_eq!(all.shape(), &[8, 8]);
        // identical normalized positions on the two levels
        for p in 0..4 {
            let diff = all.value().row(p).iter().zip(all.value().row(4 + p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff > 1e-6);
        }
        let none = PeConfig {
            scale: ScaleEncoding::None,
            ..PeConfig::default()
        };
        let mut store = ParamStore::new();
        let pe = PositionEncoding::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &none, 8, 2).unwrap();
        let all = pe.encode(&Graph::inference(&store), &levels).unwrap().unwrap();
        assert_eq!(all.value().row(1), all.value().row(5));
    }

    #[test]
    fn learned_and_disabled_modes() {
        let config = PeConfig {
            spatial: SpatialEncoding::Learned,
            scale: ScaleEncoding::None,
            learned_max_len: 4,
            ..PeConfig::default()
        };
        let mut store = ParamStore::new();
        let pe = PositionEncoding::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &config, 6, 1).unwrap();
        let g = Graph::new(&store);
        let s = pe.spatial(&g, 3, 4, &[false; 12]).unwrap().unwrap();
        assert_eq!(s.shape(), &[12, 6]);
        assert_eq!(&s.value().row(5)[..3], store.get("transformer.row_embed").unwrap().row(1));
        assert_eq!(&s.value().row(5)[3..], store.get("transformer.col_embed").unwrap().row(1));
        let grads = g.backward(&g.sum(&s)).unwrap();
        // row 1 is used by the four cells of grid row 1
        assert_eq!(grads.param("transformer.row_embed").unwrap().row(1), &[4.0; 3]);
        assert!(pe.spatial(&g, 5, 2, &[false; 10]).is_err());

        let off = PeConfig {
            spatial: SpatialEncoding::None,
            scale: ScaleEncoding::None,
            ..PeConfig::default()
        };
        let mut store = ParamStore::new();
        let pe = PositionEncoding::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &off, 6, 1).unwrap();
        assert!(pe.encode(&Graph::inference(&store), &[((2, 2), &[false; 4])]).unwrap().is_none());
    }
}
