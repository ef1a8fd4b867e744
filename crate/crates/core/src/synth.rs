//! Synthetic blob-cell images: coloured discs on a plain background, each class
//! with its own colour and radius range, boxes bounding the drawn pixels.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::Xyxy;
use crate::data::{AnnotatedImage, RgbImage};
use crate::error::{bail, Result};

pub const SYNTH_SIZE: usize = 256;
const BACKGROUND: [u8; 3] = [236, 228, 232];
const PALETTE: [[u8; 3]; 6] = [[200, 40, 60], [40, 150, 70], [50, 70, 200], [220, 170, 30], [140, 50, 170], [30, 160, 170]];

/// Radius range of class `c`.
pub fn radius_range(c: usize) -> (usize, usize) {
    (14 + 9 * c, 20 + 9 * c)
}

/// Pixels `(x, y)` whose centre lies within `r` of `(cx, cy)`.
fn covered(x: usize, y: usize, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    dx * dx + dy * dy <= r * r
}

/// Draws a disc and returns the tight box of the pixels it covered.
fn draw_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, rgb: [u8; 3]) -> Xyxy {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for y in 0..img.height {
        for x in 0..img.width {
            if covered(x, y, cx, cy, r) {
                img.put(x, y, rgb);
                b = [b[0].min(x as f64), b[1].min(y as f64), b[2].max(x as f64 + 1.0), b[3].max(y as f64 + 1.0)];
            }
        }
    }
    b
}

/// `n` images of `SYNTH_SIZE²` with 1 to 3 non-overlapping discs each.
/// Identical for identical `seed`. Image ids run from 1.
pub fn make_synthetic(seed: u64, n: usize, classes: usize) -> Result<Vec<(RgbImage, AnnotatedImage)>> {
    if classes == 0 || classes > PALETTE.len() {
        bail!(Config, "synthetic data supports 1 to {} classes, got {classes}", PALETTE.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = RgbImage::filled(SYNTH_SIZE, SYNTH_SIZE, BACKGROUND);
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        let mut ann = AnnotatedImage {
            id: i as u64 + 1,
            file_name: format!("synth_{:04}.png", i + 1),
            width: SYNTH_SIZE,
            height: SYNTH_SIZE,
            classes: Vec::new(),
            boxes: Vec::new(),
        };
        let count = rng.random_range(1..=3);
        while placed.len() < count {
            let c = rng.random_range(0..classes);
            let (lo, hi) = radius_range(c);
            let r = rng.random_range(lo..=hi) as f64;
            let margin = r + 2.0;
            let cx = rng.random_range(margin as usize..=(SYNTH_SIZE as f64 - margin) as usize) as f64;
            let cy = rng.random_range(margin as usize..=(SYNTH_SIZE as f64 - margin) as usize) as f64;
            if placed.iter().any(|&(px, py, pr)| (px - cx).hypot(py - cy) < pr + r + 4.0) {
                continue;
            }
            placed.push((cx, cy, r));
            ann.boxes.push(draw_disc(&mut img, cx, cy, r, PALETTE[c]));
            ann.classes.push(c);
        }
        out.push((img, ann));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_the_seed() {
        let a = make_synthetic(3, 5, 3).unwrap();
        let b = make_synthetic(3, 5, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(4, 5, 3).unwrap());
    }

    #[test]
    fn count_and_contents() {
        let data = make_synthetic(0, 20, 3).unwrap();
        assert_eq!(data.len(), 20);
        for (img, ann) in &data {
            assert!((1..=3).contains(&ann.boxes.len()));
            ann.validate(3).unwrap();
            assert_eq!((img.width, img.height), (256, 256));
        }
        assert!(make_synthetic(0, 1, 0).is_err());
    }

    #[test]
    fn boxes_bound_their_discs_tightly() {
        for (img, ann) in make_synthetic(1, 10, 3).unwrap() {
            for (c, b) in ann.classes.iter().zip(&ann.boxes) {
                // integer centre and radius: the disc box is exactly centre ± radius
                let side = b[2] - b[0];
                assert_eq!(side, b[3] - b[1]);
                let (lo, hi) = radius_range(*c);
                assert!(side >= 2.0 * lo as f64 && side <= 2.0 * hi as f64);
                let (x0, y0, x1, y1) = (b[0] as usize, b[1] as usize, b[2] as usize, b[3] as usize);
                let colour = PALETTE[*c];
                let inside = |x: usize, y: usize| img.pixel(x, y) == colour;
                assert!((x0..x1).any(|x| inside(x, y0)) && (x0..x1).any(|x| inside(x, y1 - 1)));
                assert!((y0..y1).any(|y| inside(x0, y)) && (y0..y1).any(|y| inside(x1 - 1, y)));
                assert!((y0..y1).all(|y| !inside(x0 - 1, y) && !inside(x1, y)));
                assert!((x0..x1).all(|x| !inside(x, y0 - 1) && !inside(x, y1)));
            }
        }
    }
}
