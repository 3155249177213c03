//! Minimal raster line chart: accuracy (0..1) against training iteration.
//! No font dependency; tick labels use a built-in 3×5 digit glyph set.

use image::{Rgb, RgbImage};

const WIDTH: u32 = 720;
const HEIGHT: u32 = 440;
const LEFT: i64 = 56;
const RIGHT: i64 = 180;
const TOP: i64 = 20;
const BOTTOM: i64 = 40;
const GLYPH_SCALE: i64 = 2;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

// Rows of 3 bits, top to bottom.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
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
        '-' => [0, 0, 7, 0, 0],
        'k' => [4, 5, 6, 5, 5],
        _ => return None,
    })
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.rect(x0 - thick / 2, y0 - thick / 2, x0 + thick / 2, y0 + thick / 2, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// Left-aligned text whose top-left corner is `(x, y)`; returns the width.
    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) -> i64 {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for b in 0..3 {
                        if bits & (4 >> b) != 0 {
                            let px = cx + b as i64 * GLYPH_SCALE;
                            let py = y + r as i64 * GLYPH_SCALE;
                            self.rect(px, py, px + GLYPH_SCALE - 1, py + GLYPH_SCALE - 1, c);
                        }
                    }
                }
            }
            cx += 4 * GLYPH_SCALE;
        }
        cx - x
    }
}

fn text_width(s: &str) -> i64 {
    s.chars().count() as i64 * 4 * GLYPH_SCALE
}

fn iteration_label(v: f64) -> String {
    if v >= 1000.0 && v % 1000.0 == 0.0 {
        format!("{}k", v / 1000.0)
    } else {
        format!("{v}")
    }
}

/// Draws every series (y clamped to `[0, 1]`); legend entries are colour
/// swatches in series order, numbered from 1.
pub fn line_chart(series: &[Series]) -> RgbImage {
    let mut c = Canvas {
        img: RgbImage::from_pixel(WIDTH, HEIGHT, WHITE),
    };
    let (x0, x1) = (LEFT, WIDTH as i64 - RIGHT);
    let (y0, y1) = (TOP, HEIGHT as i64 - BOTTOM);
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let px = |x: f64| x0 + ((x / x_max) * (x1 - x0) as f64).round() as i64;
    let py = |y: f64| y1 - (y.clamp(0.0, 1.0) * (y1 - y0) as f64).round() as i64;

    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = py(v);
        c.line((x0, y), (x1, y), GRID, 1);
        let label = format!("{v:.2}");
        c.text(x0 - 8 - text_width(&label), y - 5, &label, BLACK);
    }
    for i in 0..=4 {
        let v = x_max * i as f64 / 4.0;
        let x = px(v);
        c.line((x, y0), (x, y1), GRID, 1);
        let label = iteration_label(v.round());
        c.text(x - text_width(&label) / 2, y1 + 8, &label, BLACK);
    }
    c.line((x0, y0), (x0, y1), BLACK, 1);
    c.line((x0, y1), (x1, y1), BLACK, 1);

    for (i, s) in series.iter().enumerate() {
        let col = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| (px(x), py(y))).collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], col, 2);
        }
        for &(x, y) in &pts {
            c.rect(x - 3, y - 3, x + 3, y + 3, col);
        }
        let ly = TOP + 10 + i as i64 * 22;
        let lx = x1 + 20;
        c.rect(lx, ly, lx + 24, ly + 10, col);
        c.text(lx + 32, ly, &(i + 1).to_string(), BLACK);
    }
    c.img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_in_their_colours() {
        let img = line_chart(&[
            Series {
                label: "a".into(),
                points: vec![(0.0, 0.0), (100.0, 1.0)],
            },
            Series {
                label: "b".into(),
                points: vec![(50.0, 0.5)],
            },
        ]);
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        let count = |col: [u8; 3]| img.pixels().filter(|p| p.0 == col).count();
        assert!(count(PALETTE[0]) > 100);
        assert!(count(PALETTE[1]) > 40);
        assert_eq!(count(PALETTE[2]), 0);
    }

    #[test]
    fn empty_chart_still_has_axes() {
        let img = line_chart(&[]);
        assert!(img.pixels().any(|p| *p == BLACK));
    }
}
