//! Frame-pair sampling and paired augmentation.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::MaskGrid;
use crate::tensor::Tensor;

/// Crop box in source pixels, flip decision and optional colour factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRecord {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub flip: bool,
    /// Brightness, contrast and saturation factors.
    pub jitter: Option<[f64; 3]>,
}

impl AugmentRecord {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            w,
            h,
            flip: false,
            jitter: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FramePair {
    pub frame1: Tensor,
    pub frame2: Tensor,
    pub seq: usize,
    pub t: usize,
    pub gap: usize,
    pub record1: AugmentRecord,
    pub record2: AugmentRecord,
    pub mask1: Arc<MaskGrid>,
    pub mask2: Arc<MaskGrid>,
}

/// Picks a sequence uniformly among those longer than `gap`, then a start
/// index uniformly among the valid ones. Returns `(sequence, t)`.
pub fn sample_index<R: Rng + ?Sized>(lengths: &[usize], gap: usize, rng: &mut R) -> Result<(usize, usize)> {
    let valid: Vec<usize> = (0..lengths.len()).filter(|&i| lengths[i] > gap).collect();
    if valid.is_empty() {
        return Err(Error::Data(format!("no sequence is longer than the frame gap {gap}")));
    }
    let seq = valid[rng.random_range(0..valid.len())];
    let t = rng.random_range(0..lengths[seq] - gap);
    Ok((seq, t))
}

/// Sequences too short for `gap`, for diagnostics.
pub fn short_sequences(lengths: &[usize], gap: usize) -> Vec<usize> {
    (0..lengths.len()).filter(|&i| lengths[i] <= gap).collect()
}

const CROP_SCALE: (f64, f64) = (0.5, 1.0);
const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const JITTER: f64 = 0.4;

/// Random resized crop box and flip for an `h × w` source.
pub fn draw_record<R: Rng + ?Sized>(h: usize, w: usize, color_jitter: bool, rng: &mut R) -> AugmentRecord {
    let area = (h * w) as f64;
    let mut rec = None;
    for _ in 0..10 {
        let target = area * rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
        let ratio = rng.random_range(CROP_RATIO.0.ln()..=CROP_RATIO.1.ln()).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            rec = Some((x, y, cw, ch));
            break;
        }
    }
    let (x, y, cw, ch) = rec.unwrap_or((0, 0, w, h));
    let flip = rng.random_bool(0.5);
    let jitter = color_jitter.then(|| {
        [
            rng.random_range(1.0 - JITTER..=1.0 + JITTER),
            rng.random_range(1.0 - JITTER..=1.0 + JITTER),
            rng.random_range(1.0 - JITTER..=1.0 + JITTER),
        ]
    });
    AugmentRecord {
        x,
        y,
        w: cw,
        h: ch,
        flip,
        jitter,
    }
}

/// Crops `frame` (`[3,H,W]`) to the record's box, resizes bilinearly to
/// `out × out`, flips and jitters.
pub fn apply_record(frame: &Tensor, rec: &AugmentRecord, out: usize) -> Result<Tensor> {
    let [c, h, w] = frame.shape()[..] else {
        return Err(Error::Data(format!("frame must be [3,H,W], got {:?}", frame.shape())));
    };
    if rec.w == 0 || rec.h == 0 || rec.x + rec.w > w || rec.y + rec.h > h {
        return Err(Error::Data(format!("crop box {rec:?} outside a {h}x{w} frame")));
    }
    let src = frame.data();
    let coord = |o: usize, start: usize, len: usize| {
        let s = (o as f64 + 0.5) * len as f64 / out as f64 - 0.5;
        let s = s.clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (start + i0, start + i1, s - i0 as f64)
    };
    let mut data = vec![0.0; c * out * out];
    for oy in 0..out {
        let (y0, y1, fy) = coord(oy, rec.y, rec.h);
        for ox in 0..out {
            let (x0, x1, fx) = coord(ox, rec.x, rec.w);
            let dx = if rec.flip { out - 1 - ox } else { ox };
            for ci in 0..c {
                let p = &src[ci * h * w..];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                data[(ci * out + oy) * out + dx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    if let Some([b, con, sat]) = rec.jitter {
        jitter(&mut data, out * out, b, con, sat);
    }
    Tensor::new(&[c, out, out], data)
}

fn jitter(data: &mut [f64], plane: usize, brightness: f64, contrast: f64, saturation: f64) {
    data.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    let gray = |d: &[f64], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
    let mean = (0..plane).map(|i| gray(data, i)).sum::<f64>() / plane as f64;
    data.iter_mut()
        .for_each(|v| *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0));
    for i in 0..plane {
        let g = gray(data, i);
        for c in 0..3 {
            let v = &mut data[c * plane + i];
            *v = (g + saturation * (*v - g)).clamp(0.0, 1.0);
        }
    }
}

/// Applies one record to both frames (or independent records when
/// `same` is false).
pub fn augment_pair<R: Rng + ?Sized>(
    f1: &Tensor,
    f2: &Tensor,
    out: usize,
    same: bool,
    color_jitter: bool,
    rng: &mut R,
) -> Result<(Tensor, Tensor, AugmentRecord, AugmentRecord)> {
    if f1.shape() != f2.shape() || f1.ndim() != 3 {
        return Err(Error::Data(format!(
            "pair frames differ in shape: {:?} vs {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    let (h, w) = (f1.shape()[1], f1.shape()[2]);
    let r1 = draw_record(h, w, color_jitter, rng);
    let r2 = if same { r1 } else { draw_record(h, w, color_jitter, rng) };
    Ok((apply_record(f1, &r1, out)?, apply_record(f2, &r2, out)?, r1, r2))
}
