//! Minimal line plots rendered straight to PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub type Rgb = [u8; 3];

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;
const BACKGROUND: Rgb = [255, 255, 255];
const AXIS: Rgb = [0, 0, 0];
const GRID: Rgb = [225, 225, 225];

/// One polyline; `None` points break the line.
pub struct Series {
    pub color: Rgb,
    pub points: Vec<Option<f64>>,
}

pub struct Canvas {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        let pixels = BACKGROUND.repeat((width * height) as usize);
        Canvas { width, height, pixels }
    }

    #[cfg(test)]
    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = ((y as u32 * self.width + x as u32) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn thick_line(&mut self, a: (i64, i64), b: (i64, i64), c: Rgb) {
        for o in -1..=1 {
            self.line((a.0, a.1 + o), (b.0, b.1 + o), c);
        }
    }

    pub fn fill(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.set(x, y, c);
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> std::io::Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width, self.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(std::io::Error::other)?;
        writer.write_image_data(&self.pixels).map_err(std::io::Error::other)?;
        writer.finish().map_err(std::io::Error::other)
    }
}

/// Steps on the x axis, values on a y axis starting at zero. Each series gets a
/// legend swatch in the top-right corner, in order.
pub fn line_chart(series: &[Series]) -> Canvas {
    let mut canvas = Canvas::new(WIDTH, HEIGHT);
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let (left, right, top, bottom) = (MARGIN, w - MARGIN, MARGIN, h - MARGIN);
    let steps = series.iter().map(|s| s.points.len()).max().unwrap_or(0).max(2);
    let y_max = series
        .iter()
        .flat_map(|s| s.points.iter().flatten())
        .fold(0.0f64, |m, &v| m.max(v));
    let y_max = if y_max > 0.0 { y_max * 1.1 } else { 1.0 };

    let px = |i: usize| left + (i as i64 * (right - left)) / (steps as i64 - 1);
    let py = |v: f64| bottom - ((v / y_max) * (bottom - top) as f64).round() as i64;

    for k in 1..=4 {
        let y = bottom - k * (bottom - top) / 4;
        canvas.line((left, y), (right, y), GRID);
    }
    canvas.line((left, bottom), (right, bottom), AXIS);
    canvas.line((left, top), (left, bottom), AXIS);
    for i in 0..steps {
        canvas.line((px(i), bottom), (px(i), bottom + 5), AXIS);
    }

    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        for (i, p) in s.points.iter().enumerate() {
            match p {
                Some(v) => {
                    let here = (px(i), py(*v));
                    if let Some(a) = prev {
                        canvas.thick_line(a, here, s.color);
                    }
                    canvas.fill((here.0 - 2, here.1 - 2), (here.0 + 2, here.1 + 2), s.color);
                    prev = Some(here);
                }
                None => prev = None,
            }
        }
    }

    for (k, s) in series.iter().enumerate() {
        let y = top + 4 + 14 * k as i64;
        canvas.fill((right - 30, y), (right - 10, y + 8), s.color);
    }
    canvas
}
