//! Synthetic videos of rigid shapes sliding over a static textured background.
//!
//! Shapes are rasterized with integer geometry and no anti-aliasing, so the
//! label maps are exact. Each shape moves by a constant integer velocity per
//! frame and stays fully inside the frame for the whole sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::{LabelMap, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Whether pixel `(x, y)` lies inside a shape of half-extent `r` centred at `(cx, cy)`.
    pub fn contains(self, cx: i64, cy: i64, r: i64, x: i64, y: i64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // apex at (cx, cy - r), base row at cy + r spanning cx ± r
            ShapeKind::Triangle => dy <= r && 2 * dx.abs() <= dy + r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrack {
    pub kind: ShapeKind,
    pub radius: i64,
    pub start: (i64, i64),
    pub velocity: (i64, i64),
    pub color: [u8; 3],
}

impl ShapeTrack {
    pub fn center_at(&self, t: usize) -> (i64, i64) {
        let t = t as i64;
        (self.start.0 + self.velocity.0 * t, self.start.1 + self.velocity.1 * t)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub name: String,
    pub frames: Vec<Raster>,
    pub labels: Vec<LabelMap>,
    pub shapes: Vec<ShapeTrack>,
}

const MAX_SPEED: i64 = 2;

/// Generates `sequences` videos of `frames` square `size × size` frames.
pub fn generate(seed: u64, sequences: usize, frames: usize, size: usize, patch: usize) -> Result<Vec<SyntheticSequence>> {
    if patch == 0 || size == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Config(format!("frame size {size} is not divisible by patch size {patch}")));
    }
    if size < 16 {
        return Err(Error::Config(format!("frame size {size} is too small for synthetic shapes")));
    }
    if frames == 0 {
        return Err(Error::Config("sequences need at least one frame".into()));
    }
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    (0..sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(root.random());
            Ok(sequence(format!("seq{i:04}"), frames, size, &mut rng))
        })
        .collect()
}

fn sequence(name: String, frames: usize, size: usize, rng: &mut ChaCha8Rng) -> SyntheticSequence {
    let background = texture(size, rng);
    let count = rng.random_range(1..=3);
    let shapes: Vec<ShapeTrack> = (0..count).map(|_| track(frames, size, rng)).collect();
    let mut out_frames = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut img = background.clone();
        let mut lab = LabelMap::new(size, size);
        for (k, s) in shapes.iter().enumerate() {
            let (cx, cy) = s.center_at(t);
            for y in (cy - s.radius).max(0)..=(cy + s.radius).min(size as i64 - 1) {
                for x in (cx - s.radius).max(0)..=(cx + s.radius).min(size as i64 - 1) {
                    if s.kind.contains(cx, cy, s.radius, x, y) {
                        let p = y as usize * size + x as usize;
                        img.data[p * 3..p * 3 + 3].copy_from_slice(&s.color);
                        lab.data[p] = (k + 1) as u8;
                    }
                }
            }
        }
        out_frames.push(img);
        labels.push(lab);
    }
    SyntheticSequence {
        name,
        frames: out_frames,
        labels,
        shapes,
    }
}

fn track(frames: usize, size: usize, rng: &mut ChaCha8Rng) -> ShapeTrack {
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Square,
        _ => ShapeKind::Triangle,
    };
    let s = size as i64;
    let radius = rng.random_range(s / 10..=s / 5).max(2);
    let span = frames as i64 - 1;
    let axis = |rng: &mut ChaCha8Rng| {
        let mut v = rng.random_range(-MAX_SPEED..=MAX_SPEED);
        loop {
            let lo = radius + (-v * span).max(0);
            let hi = s - 1 - radius - (v * span).max(0);
            if lo <= hi {
                return (rng.random_range(lo..=hi), v);
            }
            v -= v.signum();
        }
    };
    let (x0, vx) = axis(rng);
    let (y0, vy) = axis(rng);
    let color = loop {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let (lo, hi) = (*c.iter().min().unwrap(), *c.iter().max().unwrap());
        if hi - lo >= 96 {
            break c;
        }
    };
    ShapeTrack {
        kind,
        radius,
        start: (x0, y0),
        velocity: (vx, vy),
        color,
    }
}

/// Two random gratings per channel plus fine noise, kept to mid-range values.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut waves = [[0.0f64; 3]; 6];
    for w in &mut waves {
        let freq = rng.random_range(0.05..0.35);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        *w = [freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU)];
    }
    let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let mut data = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut v = base[c];
                for w in &waves[2 * c..2 * c + 2] {
                    v += 0.08 * (w[0] * x as f64 + w[1] * y as f64 + w[2]).sin();
                }
                v += rng.random_range(-0.03..0.03);
                data[(y * size + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Raster {
        width: size,
        height: size,
        channels: 3,
        data,
    }
}
