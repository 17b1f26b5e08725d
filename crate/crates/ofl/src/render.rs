//! Top-down raster view of a prediction as a binary PPM image.
//!
//! Second-frame points are drawn green; first-frame points warped by the
//! predicted flow are drawn red when they meet the strict accuracy test and
//! blue otherwise.

use std::fs;
use std::path::Path;

use ofl_core::geometry::{FlowField, PointError};
use ofl_core::synth::LabeledFramePair;

use crate::error::{OflError, Result};

pub const GREEN: [u8; 3] = [0, 200, 0];
pub const RED: [u8; 3] = [220, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
const BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![BACKGROUND; width * height],
        }
    }

    pub fn count(&self, color: [u8; 3]) -> usize {
        self.pixels.iter().filter(|&&p| p == color).count()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend(p);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| OflError::io(path, e))
    }

    fn dot(&mut self, x: usize, y: usize, color: [u8; 3]) {
        for dy in 0..2 {
            for dx in 0..2 {
                let (px, py) = (x + dx, y + dy);
                if px < self.width && py < self.height {
                    self.pixels[py * self.width + px] = color;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderStats {
    pub accurate: usize,
    pub inaccurate: usize,
}

pub fn render(
    pair: &LabeledFramePair,
    flow: &FlowField,
    width: usize,
    height: usize,
) -> Result<(Image, RenderStats)> {
    if flow.len() != pair.p.len() {
        return Err(OflError::Usage(format!(
            "flow has {} vectors but the first frame has {} points",
            flow.len(),
            pair.p.len()
        )));
    }
    if width < 2 || height < 2 {
        return Err(OflError::Usage("image must be at least 2×2".into()));
    }
    let warped: Vec<[f64; 3]> = pair
        .p
        .positions
        .iter()
        .zip(&flow.0)
        .map(|(x, f)| [x[0] + f[0], x[1] + f[1], x[2] + f[2]])
        .collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in warped.iter().chain(&pair.q.positions) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9) * 1.05;
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let scale = (width.min(height) - 2) as f64 / span;
    let pixel = |p: &[f64; 3]| {
        let x = (width as f64 / 2.0 + (p[0] - c[0]) * scale)
            .floor()
            .clamp(0.0, (width - 2) as f64);
        let y = (height as f64 / 2.0 - (p[1] - c[1]) * scale)
            .floor()
            .clamp(0.0, (height - 2) as f64);
        (x as usize, y as usize)
    };
    let mut img = Image::new(width, height);
    for q in &pair.q.positions {
        let (x, y) = pixel(q);
        img.dot(x, y, GREEN);
    }
    let mut stats = RenderStats {
        accurate: 0,
        inaccurate: 0,
    };
    let mut inaccurate = Vec::new();
    for (i, w) in warped.iter().enumerate() {
        if PointError::new(&flow.0[i], &pair.gt_flow.0[i]).strict() {
            stats.accurate += 1;
            let (x, y) = pixel(w);
            img.dot(x, y, RED);
        } else {
            stats.inaccurate += 1;
            inaccurate.push(pixel(w));
        }
    }
    // inaccurate points on top so none are hidden
    for (x, y) in inaccurate {
        img.dot(x, y, BLUE);
    }
    Ok((img, stats))
}
