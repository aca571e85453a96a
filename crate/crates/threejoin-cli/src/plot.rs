//! Minimal static line plots rendered straight into a PNG.
//!
//! Axes, gridlines, polylines and a tiny 3x5 bitmap font for labels; no
//! font or plotting dependency, which keeps the renders byte-stable for
//! the determinism guarantees the pipeline makes about its artifacts.

use std::path::Path;

use threejoin_core::raster::Raster;
use threejoin_core::{Error, Result};

pub struct Series<'a> {
    pub label: &'a str,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

pub const PALETTE: [[u8; 3]; 6] = [
    [20, 20, 20],
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
];

const WIDTH: usize = 640;
const HEIGHT: usize = 440;
const LEFT: usize = 64;
const RIGHT: usize = 16;
const TOP: usize = 28;
const BOTTOM: usize = 40;

/// Rows top-to-bottom, 3 bits each, most significant bit leftmost.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        '@' => [0b010, 0b101, 0b111, 0b100, 0b011],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b111, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b111, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b011, 0b001],
        'R' => [0b110, 0b101, 0b110, 0b110, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        _ => [0; 5],
    }
}

fn put(img: &mut Raster, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.set_rgb(x as usize, y as usize, color);
    }
}

fn draw_line(img: &mut Raster, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
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

fn draw_text(img: &mut Raster, x: i64, y: i64, text: &str, color: [u8; 3]) {
    const SCALE: i64 = 2;
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..3 {
                if row >> (2 - rx) & 1 == 1 {
                    for oy in 0..SCALE {
                        for ox in 0..SCALE {
                            put(
                                img,
                                cx + rx as i64 * SCALE + ox,
                                y + ry as i64 * SCALE + oy,
                                color,
                            );
                        }
                    }
                }
            }
        }
        cx += 4 * SCALE;
    }
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0".into()
    } else if !(0.001..10000.0).contains(&a) {
        format!("{v:.1E}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Render every series into one plot with shared axes; `path` gets a PNG.
pub fn line_plot(path: &Path, title: &str, series: &[Series<'_>]) -> Result<()> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::Validation(format!(
            "nothing to plot for {title:?}"
        )));
    }
    for &(x, y) in &points {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite point ({x}, {y}) in plot {title:?}"
            )));
        }
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max - x_min < 1e-12 {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = (y_max - y_min) * 0.05;
    y_min -= pad;
    y_max += pad;

    let mut img = Raster::new_rgb(WIDTH, HEIGHT);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            img.set_rgb(x, y, [255, 255, 255]);
        }
    }

    let plot_w = (WIDTH - LEFT - RIGHT) as f64;
    let plot_h = (HEIGHT - TOP - BOTTOM) as f64;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = LEFT as f64 + (x - x_min) / (x_max - x_min) * plot_w;
        let py = (HEIGHT - BOTTOM) as f64 - (y - y_min) / (y_max - y_min) * plot_h;
        (px.round() as i64, py.round() as i64)
    };

    let axis = [90, 90, 90];
    let grid = [225, 225, 225];
    for i in 0..=4 {
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let (_, py) = to_px(x_min, fy);
        let (px, _) = to_px(fx, y_min);
        draw_line(&mut img, LEFT as i64, py, (WIDTH - RIGHT) as i64, py, grid);
        draw_line(&mut img, px, TOP as i64, px, (HEIGHT - BOTTOM) as i64, grid);
        draw_text(&mut img, 2, py - 5, &fmt_tick(fy), axis);
        draw_text(&mut img, px - 10, (HEIGHT - BOTTOM + 8) as i64, &fmt_tick(fx), axis);
    }
    draw_line(
        &mut img,
        LEFT as i64,
        TOP as i64,
        LEFT as i64,
        (HEIGHT - BOTTOM) as i64,
        axis,
    );
    draw_line(
        &mut img,
        LEFT as i64,
        (HEIGHT - BOTTOM) as i64,
        (WIDTH - RIGHT) as i64,
        (HEIGHT - BOTTOM) as i64,
        axis,
    );
    draw_text(&mut img, LEFT as i64, 8, title, [20, 20, 20]);

    let mut legend_y = TOP as i64 + 6;
    for s in series {
        for window in s.points.windows(2) {
            let (x0, y0) = to_px(window[0].0, window[0].1);
            let (x1, y1) = to_px(window[1].0, window[1].1);
            draw_line(&mut img, x0, y0, x1, y1, s.color);
            draw_line(&mut img, x0, y0 + 1, x1, y1 + 1, s.color);
        }
        if s.points.len() == 1 {
            let (x0, y0) = to_px(s.points[0].0, s.points[0].1);
            for dy in -1..=1 {
                draw_line(&mut img, x0 - 1, y0 + dy, x0 + 1, y0 + dy, s.color);
            }
        }
        if series.len() > 1 {
            let lx = (WIDTH - RIGHT) as i64 - 110;
            for dy in 0..8 {
                draw_line(&mut img, lx, legend_y + dy, lx + 8, legend_y + dy, s.color);
            }
            draw_text(&mut img, lx + 12, legend_y - 1, s.label, [20, 20, 20]);
            legend_y += 14;
        }
    }

    img.save_png(path)
}
