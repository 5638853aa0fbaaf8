//! Minimal PNG line plots for AP-vs-iteration curves.
//!
//! Renders straight onto an RGB buffer with a small built-in 5×7 glyph set
//! (digits, lowercase letters, and a few symbols) for axis labels and the
//! legend. Nothing fancy; enough to read a training curve.

use std::path::Path;

use semimultipose_core::engine::Real;

use crate::error::{AppError, Result};

pub const COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],   // red
    [31, 119, 180],  // blue
    [230, 159, 0],   // orange
    [44, 160, 44],   // green
    [148, 103, 189], // purple
    [23, 190, 207],  // cyan
];

/// One polyline with a legend label.
pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(Real, Real)>,
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

// Row-packed 5-bit masks, MSB on the left.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1E, 0x01, 0x01, 0x06, 0x01, 0x01, 0x1E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0; 7],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x11, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0F, 0x11, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x08, 0x1C, 0x08, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x1E, 0x11, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x15, 0x15, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x11, 0x11, 0x0F, 0x01, 0x11, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F], // unknown -> box
    }
}

struct Canvas {
    w: usize,
    h: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            pixels: vec![255; w * h * 3],
        }
    }

    fn put(&mut self, x: isize, y: isize, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            return;
        }
        let base = (y as usize * self.w + x as usize) * 3;
        self.pixels[base..base + 3].copy_from_slice(&color);
    }

    fn line(&mut self, x0: Real, y0: Real, x1: Real, y1: Real, color: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as Real / steps as Real;
            let x = x0 + t * (x1 - x0);
            let y = y0 + t * (y1 - y0);
            self.put(x.round() as isize, y.round() as isize, color);
            // thicken slightly for visibility
            self.put(x.round() as isize, y.round() as isize + 1, color);
        }
    }

    fn text(&mut self, x: usize, y: usize, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch.to_ascii_lowercase());
            for (gy, row) in rows.iter().enumerate() {
                for gx in 0..GLYPH_W {
                    if row & (1 << (GLYPH_W - 1 - gx)) != 0 {
                        self.put((cx + gx) as isize, (y + gy) as isize, color);
                    }
                }
            }
            cx += GLYPH_W + 1;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.w as u32, self.h as u32, self.pixels.clone())
                .expect("buffer sized to dimensions");
        buf.save(path)
            .map_err(|e| AppError::runtime(format!("writing {}: {e}", path.display())))
    }
}

/// Renders labeled polylines into a PNG with axes and tick labels.
pub fn render_curves(series: &[Series], title: &str, out: &Path) -> Result<()> {
    if series.is_empty() {
        return Err(AppError::validation("nothing to plot"));
    }
    let (w, h) = (860usize, 520usize);
    let (left, right, top, bottom) = (70.0, 20.0, 30.0, 50.0);
    let (pw, ph) = (w as Real - left - right, h as Real - top - bottom);
    let black = [0u8, 0, 0];
    let grey = [200u8, 200, 200];

    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let x_max = xs.fold(1.0 as Real, Real::max);
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let y_max = ys.fold(0.0 as Real, Real::max).max(0.1).min(1.0).max(0.2);
    let y_max = (y_max * 10.0).ceil() / 10.0;

    let mut canvas = Canvas::new(w, h);
    let to_px = |x: Real, y: Real| -> (Real, Real) {
        (
            left + (x / x_max) * pw,
            (h as Real - bottom) - (y / y_max) * ph,
        )
    };

    // gridlines + ticks
    for i in 0..=5 {
        let y = y_max * i as Real / 5.0;
        let (x0, py) = to_px(0.0, y);
        let (x1, _) = to_px(x_max, y);
        canvas.line(x0, py, x1, py, grey);
        canvas.text(18, py as usize - 3, &format!("{y:.2}"), black);
    }
    for i in 0..=5 {
        let x = x_max * i as Real / 5.0;
        let (px, y0) = to_px(x, 0.0);
        canvas.line(px, y0, px, y0 + 4.0, black);
        canvas.text(px as usize - 10, y0 as usize + 8, &format!("{}", x as i64), black);
    }
    // axes
    let (ox, oy) = to_px(0.0, 0.0);
    let (ax1, _) = to_px(x_max, 0.0);
    let (_, ay1) = to_px(0.0, y_max);
    canvas.line(ox, oy, ax1, oy, black);
    canvas.line(ox, oy, ox, ay1, black);
    canvas.text(left as usize, 10, title, black);
    canvas.text(w - 120, h - 14, "iteration", black);
    canvas.text(6, top as usize - 12, "test ap", black);

    for (si, s) in series.iter().enumerate() {
        for pair in s.points.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1.clamp(0.0, y_max));
            let (x1, y1) = to_px(pair[1].0, pair[1].1.clamp(0.0, y_max));
            canvas.line(x0, y0, x1, y1, s.color);
        }
        // legend
        let ly = top as usize + 14 * si;
        for dx in 0..18 {
            canvas.put((left + 8.0) as isize + dx, ly as isize + 3, s.color);
            canvas.put((left + 8.0) as isize + dx, ly as isize + 4, s.color);
        }
        canvas.text(left as usize + 32, ly, &s.label, black);
    }
    canvas.save(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_readable_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.png");
        let series = vec![
            Series {
                label: "semi".into(),
                color: COLORS[0],
                points: (0..=10).map(|i| (i as Real * 100.0, i as Real / 12.0)).collect(),
            },
            Series {
                label: "supervised".into(),
                color: COLORS[1],
                points: (0..=10).map(|i| (i as Real * 100.0, i as Real / 20.0)).collect(),
            },
        ];
        render_curves(&series, "ap vs iteration - 5 labeled", &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 860);
        assert_eq!(img.height(), 520);
    }
}
