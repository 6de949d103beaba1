//! Minimal PNG chart rendering: line charts and bar charts with a built-in
//! 3x5 pixel font for titles, ticks and legends.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 720;
const HEIGHT: u32 = 440;
const LEFT: i64 = 80;
const RIGHT: i64 = 24;
const TOP: i64 = 44;
const BOTTOM: i64 = 56;
const SCALE: i64 = 2;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([23, 190, 207]),
];

fn glyph(ch: char) -> [u8; 5] {
    match ch.to_ascii_lowercase() {
        '0' | 'o' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' | 's' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [7, 4, 4, 4, 7],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [7, 4, 5, 5, 7],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 7],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'p' => [7, 5, 7, 4, 4],
        'q' => [7, 5, 5, 7, 1],
        'r' => [6, 5, 6, 5, 5],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        ':' => [0, 2, 0, 2, 0],
        '=' => [0, 7, 0, 7, 0],
        '+' => [0, 2, 7, 2, 0],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        '/' => [1, 1, 2, 4, 4],
        '%' => [5, 1, 2, 4, 5],
        _ => [0; 5],
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, WHITE),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && x < WIDTH as i64 && y < HEIGHT as i64 {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: bool) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut e) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if thick {
                self.put(x + 1, y, c);
                self.put(x, y + 1, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * e;
            if e2 >= dy {
                e += dy;
                x += sx;
            }
            if e2 <= dx {
                e += dx;
                y += sy;
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (k, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            let ox = x + k as i64 * 4 * SCALE;
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        let px = ox + col * SCALE;
                        let py = y + row as i64 * SCALE;
                        self.rect(px, py, px + SCALE - 1, py + SCALE - 1, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * 4 * SCALE
    }

    fn save(self, path: &Path) -> image::ImageResult<()> {
        self.img.save(path)
    }
}

pub fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        Some((lo - pad, hi + pad))
    } else {
        let d = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        Some((lo - d, hi + d))
    }
}

fn frame(c: &mut Canvas, title: &str, x_label: &str, y_label: &str) -> (i64, i64, i64, i64) {
    let (x0, y0) = (LEFT, HEIGHT as i64 - BOTTOM);
    let (x1, y1) = (WIDTH as i64 - RIGHT, TOP);
    c.text(LEFT, 12, title, BLACK);
    c.text((x0 + x1) / 2 - Canvas::text_width(x_label) / 2, HEIGHT as i64 - 18, x_label, BLACK);
    c.text(8, TOP - 22, y_label, BLACK);
    (x0, y0, x1, y1)
}

pub fn line_chart(path: &Path, chart: &LineChart) -> image::ImageResult<()> {
    let mut c = Canvas::new();
    let (x0, y0, x1, y1) = frame(&mut c, &chart.title, &chart.x_label, &chart.y_label);
    let ty = |v: f64| if chart.log_y { v.max(1e-300).log10() } else { v };
    let xb = bounds(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yb = bounds(chart.series.iter().flat_map(|s| s.points.iter().map(|p| ty(p.1))));
    if let (Some((xa, xz)), Some((ya, yz))) = (xb, yb) {
        let px = |x: f64| x0 + ((x - xa) / (xz - xa) * (x1 - x0) as f64).round() as i64;
        let py = |y: f64| y0 - ((ty(y) - ya) / (yz - ya) * (y0 - y1) as f64).round() as i64;
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let yv = ya + f * (yz - ya);
            let yy = y0 - (f * (y0 - y1) as f64).round() as i64;
            c.line((x0, yy), (x1, yy), GRID, false);
            let label = tick_label(if chart.log_y { 10f64.powf(yv) } else { yv });
            c.text(x0 - 6 - Canvas::text_width(&label), yy - 5, &label, BLACK);
            let xv = xa + f * (xz - xa);
            let xx = x0 + (f * (x1 - x0) as f64).round() as i64;
            c.line((xx, y0), (xx, y0 + 4), BLACK, false);
            let label = tick_label(xv);
            c.text(xx - Canvas::text_width(&label) / 2, y0 + 8, &label, BLACK);
        }
        for (k, s) in chart.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<(i64, i64)> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && ty(p.1).is_finite())
                .map(|p| (px(p.0), py(p.1)))
                .collect();
            for w in pts.windows(2) {
                c.line(w[0], w[1], color, true);
            }
            if pts.len() == 1 {
                c.rect(pts[0].0 - 2, pts[0].1 - 2, pts[0].0 + 2, pts[0].1 + 2, color);
            }
        }
    }
    c.line((x0, y0), (x1, y0), BLACK, false);
    c.line((x0, y0), (x0, y1), BLACK, false);
    legend(&mut c, chart.series.iter().map(|s| s.label.as_str()), x1);
    c.save(path)
}

fn legend<'a>(c: &mut Canvas, labels: impl Iterator<Item = &'a str>, right: i64) {
    for (k, label) in labels.enumerate() {
        let y = TOP + 6 + k as i64 * 16;
        let x = right - 14 - Canvas::text_width(label) - 16;
        c.rect(x, y, x + 10, y + 8, PALETTE[k % PALETTE.len()]);
        c.text(x + 16, y, label, BLACK);
    }
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    categories: &[String],
    series: &[(String, Vec<f64>)],
) -> image::ImageResult<()> {
    let mut c = Canvas::new();
    let (x0, y0, x1, y1) = frame(&mut c, title, "", y_label);
    let top = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let top = if top > 0.0 { top * 1.05 } else { 1.0 };
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let yy = y0 - (f * (y0 - y1) as f64).round() as i64;
        c.line((x0, yy), (x1, yy), GRID, false);
        let label = tick_label(f * top);
        c.text(x0 - 6 - Canvas::text_width(&label), yy - 5, &label, BLACK);
    }
    let groups = categories.len().max(1) as i64;
    let group_w = (x1 - x0) / groups;
    let bars = series.len().max(1) as i64;
    let bar_w = ((group_w - 16) / bars).max(2);
    for (g, cat) in categories.iter().enumerate() {
        let gx = x0 + g as i64 * group_w + 8;
        for (k, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            if !v.is_finite() {
                continue;
            }
            let h = ((v / top) * (y0 - y1) as f64).round() as i64;
            let bx = gx + k as i64 * bar_w;
            c.rect(bx, y0 - h, bx + bar_w - 2, y0 - 1, PALETTE[k % PALETTE.len()]);
        }
        c.text(gx + group_w / 2 - 8 - Canvas::text_width(cat) / 2, y0 + 8, cat, BLACK);
    }
    c.line((x0, y0), (x1, y0), BLACK, false);
    c.line((x0, y0), (x0, y1), BLACK, false);
    legend(&mut c, series.iter().map(|s| s.0.as_str()), x1);
    c.save(path)
}
