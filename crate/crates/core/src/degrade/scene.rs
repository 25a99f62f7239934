//! Procedural toy scenes: textured gradients with soft-edged moving shapes.

use rand::Rng;

use crate::codec::{Mask, VideoTensor};

const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.9]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("cyan", [0.1, 0.85, 0.85]),
    ("magenta", [0.85, 0.15, 0.8]),
    ("white", [0.95, 0.95, 0.95]),
    ("orange", [0.95, 0.55, 0.1]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    /// Radius in pixels.
    pub radius: f32,
    /// Center at frame 0, pixels.
    pub origin: (f32, f32),
    /// Pixels per frame.
    pub velocity: (f32, f32),
}

impl Shape {
    fn center(&self, frame: usize) -> (f32, f32) {
        (self.origin.0 + self.velocity.0 * frame as f32, self.origin.1 + self.velocity.1 * frame as f32)
    }

    /// Soft coverage in [0, 1] at pixel center `(y, x)`.
    fn coverage(&self, frame: usize, y: f32, x: f32) -> f32 {
        let (cy, cx) = self.center(frame);
        let d = match self.kind {
            ShapeKind::Disc => ((y - cy).powi(2) + (x - cx).powi(2)).sqrt(),
            ShapeKind::Square => (y - cy).abs().max((x - cx).abs()),
        };
        (self.radius - d + 0.5).clamp(0.0, 1.0)
    }

    /// Pixel bounding box `(y0, x0, y1, x1)` (exclusive ends) touched at `frame`.
    pub fn bounds(&self, frame: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (cy, cx) = self.center(frame);
        let reach = self.radius * std::f32::consts::SQRT_2 + 1.0;
        let clampi = |v: f32, hi: usize| (v.floor().max(0.0) as usize).min(hi);
        (
            clampi(cy - reach, height),
            clampi(cx - reach, width),
            clampi(cy + reach + 1.0, height),
            clampi(cx + reach + 1.0, width),
        )
    }

    fn direction(&self) -> &'static str {
        let (vy, vx) = self.velocity;
        if vx.abs() >= vy.abs() {
            if vx >= 0.0 { "right" } else { "left" }
        } else if vy >= 0.0 {
            "down"
        } else {
            "up"
        }
    }
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: [usize; 2],
    /// Unit direction of the background gradient.
    pub gradient: (f32, f32),
    pub texture_amplitude: f32,
    /// Spatial frequency (cycles per pixel) along y and x.
    pub texture_freq: (f32, f32),
    pub texture_phase: f32,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Random scene; `texture_amplitude` sets how much fine detail the
    /// background carries.
    pub fn random<R: Rng>(rng: &mut R, frames: usize, height: usize, width: usize, texture_amplitude: f32) -> Self {
        let bg0 = rng.random_range(0..PALETTE.len());
        let bg1 = (bg0 + rng.random_range(1..PALETTE.len())) % PALETTE.len();
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let count = rng.random_range(1..=2);
        let min_side = height.min(width) as f32;
        let shapes = (0..count)
            .map(|_| {
                let radius = rng.random_range(0.12..0.22) * min_side;
                Shape {
                    kind: if rng.random_bool(0.5) { ShapeKind::Disc } else { ShapeKind::Square },
                    color: (bg0 + rng.random_range(1..PALETTE.len())) % PALETTE.len(),
                    radius,
                    origin: (
                        rng.random_range(radius..(height as f32 - radius).max(radius + 0.5)),
                        rng.random_range(radius..(width as f32 - radius).max(radius + 0.5)),
                    ),
                    velocity: (
                        rng.random_range(-0.08..0.08) * height as f32,
                        rng.random_range(-0.08..0.08) * width as f32,
                    ),
                }
            })
            .collect();
        Self {
            frames,
            height,
            width,
            background: [bg0, bg1],
            gradient: (angle.sin(), angle.cos()),
            texture_amplitude,
            texture_freq: (rng.random_range(0.18..0.45), rng.random_range(0.18..0.45)),
            texture_phase: rng.random_range(0.0..std::f32::consts::TAU),
            shapes,
        }
    }

    pub fn render(&self) -> VideoTensor {
        let (h, w) = (self.height as f32, self.width as f32);
        let [b0, b1] = self.background.map(|i| PALETTE[i].1);
        VideoTensor::from_fn(self.frames, 3, self.height, self.width, |f, c, y, x| {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let g = (((py / h - 0.5) * self.gradient.0 + (px / w - 0.5) * self.gradient.1) + 0.5).clamp(0.0, 1.0);
            let tex = self.texture_amplitude
                * (std::f32::consts::TAU * (self.texture_freq.0 * py + self.texture_freq.1 * px) + self.texture_phase)
                    .sin();
            let mut v = b0[c] * (1.0 - g) + b1[c] * g + tex;
            for s in &self.shapes {
                let a = s.coverage(f, py, px);
                v = v * (1.0 - a) + PALETTE[s.color].1[c] * a;
            }
            v.clamp(0.0, 1.0)
        })
    }

    /// Short caption naming the shapes, their motion and the background.
    pub fn prompt(&self) -> String {
        let parts: Vec<String> = self
            .shapes
            .iter()
            .map(|s| {
                let kind = match s.kind {
                    ShapeKind::Disc => "disc",
                    ShapeKind::Square => "square",
                };
                format!("{} {kind} moving {}", PALETTE[s.color].0, s.direction())
            })
            .collect();
        format!("{} over {} and {} background", parts.join(" and "), PALETTE[self.background[0]].0, PALETTE[self.background[1]].0)
    }

    /// Per-frame bounding boxes of shape `i` as a mask.
    pub fn shape_mask(&self, i: usize) -> Mask {
        let mut mask = Mask::filled(self.frames, self.height, self.width, false);
        for f in 0..self.frames {
            let (y0, x0, y1, x1) = self.shapes[i].bounds(f, self.height, self.width);
            for y in y0..y1 {
                for x in x0..x1 {
                    mask.set(f, y, x, true);
                }
            }
        }
        mask
    }

    /// Same scene with shape `i` recolored.
    pub fn recolored(&self, i: usize, color: usize) -> Self {
        let mut s = self.clone();
        s.shapes[i].color = color % PALETTE.len();
        s
    }

    pub fn palette_len() -> usize {
        PALETTE.len()
    }
}
