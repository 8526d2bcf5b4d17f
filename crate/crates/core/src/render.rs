//! Anti-aliased 2-D shape rasteriser shared by the synthetic corpus and the
//! toy environment. Coordinates are in the unit square, y pointing down.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disc,
    Ring,
    Square,
    Bar,
    Cross,
    Diamond,
    Triangle,
    HollowSquare,
}

const SHAPES: [ShapeKind; 8] = [
    ShapeKind::Disc,
    ShapeKind::Ring,
    ShapeKind::Square,
    ShapeKind::Bar,
    ShapeKind::Cross,
    ShapeKind::Diamond,
    ShapeKind::Triangle,
    ShapeKind::HollowSquare,
];

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.20, 0.15],
    [0.20, 0.90, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.90, 0.15],
    [0.90, 0.20, 0.90],
    [0.15, 0.90, 0.90],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub shape: ShapeKind,
    pub color: [f32; 3],
    /// Half-extent in unit-square coordinates.
    pub size: f32,
}

/// Appearance of synthetic class `k`. Classes 0..8 pair shape `k` with
/// colour `k`; later classes cycle the colour offset.
pub fn class_appearance(k: usize) -> Appearance {
    let shape = SHAPES[k % SHAPES.len()];
    let color = PALETTE[(k + k / SHAPES.len()) % PALETTE.len()];
    Appearance { shape, color, size: 0.12 }
}

/// Neutral grey object used as the interaction target in synthetic clips.
pub fn prop_appearance() -> Appearance {
    Appearance { shape: ShapeKind::HollowSquare, color: [0.55, 0.55, 0.55], size: 0.1 }
}

/// Signed distance (negative inside) from `(px, py)` to `shape` centred at
/// the origin with half-extent `s`.
fn sdf(shape: ShapeKind, px: f32, py: f32, s: f32) -> f32 {
    let box_sdf = |hx: f32, hy: f32| {
        let dx = px.abs() - hx;
        let dy = py.abs() - hy;
        let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
        outside + dx.max(dy).min(0.0)
    };
    match shape {
        ShapeKind::Disc => (px * px + py * py).sqrt() - s,
        ShapeKind::Ring => ((px * px + py * py).sqrt() - 0.7 * s).abs() - 0.3 * s,
        ShapeKind::Square => box_sdf(0.8 * s, 0.8 * s),
        ShapeKind::Bar => box_sdf(1.2 * s, 0.4 * s),
        ShapeKind::Cross => {
            let a = box_sdf(s, 0.3 * s);
            let dx = py.abs() - s;
            let dy = px.abs() - 0.3 * s;
            let b = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt() + dx.max(dy).min(0.0);
            a.min(b)
        }
        ShapeKind::Diamond => (px.abs() + py.abs() - s) * std::f32::consts::FRAC_1_SQRT_2,
        ShapeKind::Triangle => {
            // Upward triangle: base at y = +0.8s, apex at y = -s.
            let base = py - 0.8 * s;
            let edge = (1.8 * px.abs() - (py + s)) / (1.8f32 * 1.8 + 1.0).sqrt();
            base.max(edge)
        }
        ShapeKind::HollowSquare => box_sdf(0.85 * s, 0.85 * s).abs() - 0.22 * s,
    }
}

/// HWC canvas with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Canvas {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl Canvas {
    pub fn new(h: usize, w: usize, background: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            pixels.extend_from_slice(&background);
        }
        Self { h, w, pixels }
    }

    /// Alpha-blend `app` centred at `(cx, cy)`; coverage ramps over one pixel.
    pub fn draw(&mut self, app: &Appearance, cx: f32, cy: f32) {
        let px_size = 1.0 / self.w.max(self.h) as f32;
        for y in 0..self.h {
            let py = (y as f32 + 0.5) / self.h as f32 - cy;
            for x in 0..self.w {
                let px = (x as f32 + 0.5) / self.w as f32 - cx;
                let d = sdf(app.shape, px, py, app.size);
                let alpha = (0.5 - d / px_size).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let o = (y * self.w + x) * 3;
                    for ch in 0..3 {
                        self.pixels[o + ch] = self.pixels[o + ch] * (1.0 - alpha) + app.color[ch] * alpha;
                    }
                }
            }
        }
    }

    /// Axis-aligned filled rectangle given by its corners.
    pub fn fill_rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, color: [f32; 3]) {
        for y in 0..self.h {
            let cy = (y as f32 + 0.5) / self.h as f32;
            if cy < y0 || cy > y1 {
                continue;
            }
            for x in 0..self.w {
                let cx = (x as f32 + 0.5) / self.w as f32;
                if cx >= x0 && cx <= x1 {
                    let o = (y * self.w + x) * 3;
                    self.pixels[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }

    /// Round every value to the nearest multiple of 1/255 so the image
    /// survives an 8-bit lossless round trip unchanged.
    pub fn quantized(mut self) -> Vec<f32> {
        for p in &mut self.pixels {
            *p = quantize(*p);
        }
        self.pixels
    }
}

pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
