//! Prediction overlays: coloured boxes with confidence labels.

use mfds_core::boxes::Xyxy;
use mfds_core::data::{RgbImage, Schema};
use mfds_core::eval::Detection;
use serde::Serialize;

pub const GROUND_TRUTH: [u8; 3] = [0, 0, 0];

/// Leukocyte colours by class name.
const NAMED: [(&str, [u8; 3]); 5] = [
    ("LYM", [0, 200, 0]),
    ("NEU", [255, 140, 0]),
    ("EOS", [128, 0, 160]),
    ("BAS", [0, 80, 255]),
    ("MON", [255, 220, 0]),
];

const FALLBACK: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

pub fn class_colour(schema: &Schema, class: usize) -> [u8; 3] {
    let name = schema.classes.get(class).map(String::as_str).unwrap_or("");
    NAMED
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, c)| *c)
        .unwrap_or(FALLBACK[class % FALLBACK.len()])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LegendEntry {
    pub label: String,
    pub colour: [u8; 3],
    pub hex: String,
}

fn entry(label: &str, c: [u8; 3]) -> LegendEntry {
    LegendEntry {
        label: label.to_string(),
        colour: c,
        hex: format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]),
    }
}

/// One entry per class in schema order, then ground truth.
pub fn legend(schema: &Schema) -> Vec<LegendEntry> {
    let mut out: Vec<LegendEntry> = schema.classes.iter().enumerate().map(|(i, n)| entry(n, class_colour(schema, i))).collect();
    out.push(entry("ground truth", GROUND_TRUTH));
    out
}

fn fill(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    for y in y0.max(0)..y1.min(img.height as i64) {
        for x in x0.max(0)..x1.min(img.width as i64) {
            img.put(x as usize, y as usize, c);
        }
    }
}

pub fn draw_box(img: &mut RgbImage, b: Xyxy, c: [u8; 3], thickness: i64) {
    let [x0, y0, x1, y1] = b.map(|v| v.round() as i64);
    fill(img, x0, y0, x1, y0 + thickness, c);
    fill(img, x0, y1 - thickness, x1, y1, c);
    fill(img, x0, y0, x0 + thickness, y1, c);
    fill(img, x1 - thickness, y0, x1, y1, c);
}

/// 3×5 glyphs for digits and the decimal point, one row per entry, MSB left.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        _ => return None,
    })
}

/// Writes `text` at `(x, y)` on a filled background, `scale` pixels per dot.
pub fn draw_label(img: &mut RgbImage, x: i64, y: i64, text: &str, bg: [u8; 3], scale: i64) {
    let n = text.chars().filter(|c| glyph(*c).is_some()).count() as i64;
    fill(img, x, y, x + (4 * n + 1) * scale, y + 7 * scale, bg);
    let luminance = 0.299 * bg[0] as f64 + 0.587 * bg[1] as f64 + 0.114 * bg[2] as f64;
    let fg = if luminance > 140.0 { [0, 0, 0] } else { [255, 255, 255] };
    let mut cx = x + scale;
    for ch in text.chars() {
        let Some(rows) = glyph(ch) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    let px = cx + col * scale;
                    let py = y + scale + r as i64 * scale;
                    fill(img, px, py, px + scale, py + scale, fg);
                }
            }
        }
        cx += 4 * scale;
    }
}

/// Draws ground truth (if any) in black, then detections scoring at least
/// `threshold`. Returns the detections drawn.
pub fn render(img: &RgbImage, detections: &[Detection], truth: &[Xyxy], threshold: f64, schema: &Schema) -> (RgbImage, Vec<Detection>) {
    let mut out = img.clone();
    let t = ((img.width.min(img.height) / 300).max(1)) as i64 + 1;
    for b in truth {
        draw_box(&mut out, *b, GROUND_TRUTH, t);
    }
    let kept: Vec<Detection> = detections.iter().filter(|d| d.score >= threshold).copied().collect();
    for d in &kept {
        let c = class_colour(schema, d.class);
        draw_box(&mut out, d.bbox, c, t);
        let label_y = (d.bbox[1].round() as i64 - 7 * t).max(0);
        draw_label(&mut out, d.bbox[0].round() as i64, label_y, &format!("{:.2}", d.score), c, t);
    }
    (out, kept)
}
