//! Paired geometric augmentation and per-band colour jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::spectral::{Raster, SemanticMask, BACKGROUND};
use crate::train::data::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotate: bool,
    pub color_jitter: bool,
    /// Rotate by a uniform angle with nearest-neighbour resampling instead
    /// of a multiple of 90 degrees.
    pub free_rotation: bool,
    pub gain: (f32, f32),
    pub offset: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            rotate: true,
            color_jitter: true,
            free_rotation: false,
            gain: (0.9, 1.1),
            offset: (-0.05, 0.05),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            rotate: false,
            color_jitter: false,
            ..Self::default()
        }
    }
}

/// A pixel remapping of a square frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometric {
    FlipH,
    FlipV,
    /// Counter-clockwise quarter turns.
    Rot90(u8),
    /// Counter-clockwise rotation about the frame centre, in degrees.
    Rotate(f64),
}

impl Geometric {
    /// Source pixel of output pixel `(y, x)` in an `n x n` frame, `None`
    /// when it falls outside.
    pub fn source_of(&self, y: usize, x: usize, n: usize) -> Option<(usize, usize)> {
        let last = n - 1;
        match *self {
            Geometric::FlipH => Some((y, last - x)),
            Geometric::FlipV => Some((last - y, x)),
            Geometric::Rot90(k) => Some(match k % 4 {
                0 => (y, x),
                1 => (x, last - y),
                2 => (last - y, last - x),
                _ => (last - x, y),
            }),
            Geometric::Rotate(deg) => {
                let (s, c) = deg.to_radians().sin_cos();
                let m = last as f64 / 2.0;
                let (dy, dx) = (y as f64 - m, x as f64 - m);
                // Inverse of a counter-clockwise rotation in image coordinates (y down).
                let sx = c * dx - s * dy + m;
                let sy = s * dx + c * dy + m;
                let (ry, rx) = (sy.round(), sx.round());
                (ry >= 0.0 && rx >= 0.0 && ry <= last as f64 && rx <= last as f64)
                    .then_some((ry as usize, rx as usize))
            }
        }
    }
}

fn remap<T: Copy>(src: &[T], n: usize, g: Geometric, fill: T) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            out.push(match g.source_of(y, x, n) {
                Some((sy, sx)) => src[sy * n + sx],
                None => fill,
            });
        }
    }
    out
}

/// Applies `g` to image, semantic mask and instance masks alike.
pub fn apply_geometric(sample: &Sample, g: Geometric) -> Sample {
    let n = sample.image.height;
    assert_eq!(n, sample.image.width, "geometric augmentation needs a square frame");
    let mut image = Raster::filled(sample.image.channels, n, n, 0.0);
    for c in 0..image.channels {
        let plane = remap(sample.image.plane(c), n, g, 0.0);
        image.plane_mut(c).copy_from_slice(&plane);
    }
    let semantic = SemanticMask {
        height: n,
        width: n,
        labels: remap(&sample.semantic.labels, n, g, BACKGROUND),
    };
    let instances = sample
        .instances
        .iter()
        .map(|(c, m)| (*c, remap(m, n, g, false)))
        .filter(|(_, m)| m.iter().any(|&b| b))
        .collect();
    Sample {
        id: sample.id.clone(),
        image,
        semantic,
        instances,
    }
}

/// Per-band `v * gain + offset`, clamped to `[0, 1]`.
pub fn jitter_bands(image: &mut Raster, gains: &[f32], offsets: &[f32]) {
    for c in 0..image.channels {
        let (g, o) = (gains[c], offsets[c]);
        for v in image.plane_mut(c) {
            *v = (*v * g + o).clamp(0.0, 1.0);
        }
    }
}

/// Draws the geometric transforms for one sample.
pub fn draw_geometric<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Vec<Geometric> {
    let mut ops = Vec::new();
    if cfg.flip {
        if rng.random_bool(0.5) {
            ops.push(Geometric::FlipH);
        }
        if rng.random_bool(0.5) {
            ops.push(Geometric::FlipV);
        }
    }
    if cfg.rotate {
        if cfg.free_rotation {
            ops.push(Geometric::Rotate(rng.random_range(0.0..360.0)));
        } else {
            let k = rng.random_range(0..4u8);
            if k > 0 {
                ops.push(Geometric::Rot90(k));
            }
        }
    }
    ops
}

pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    for g in draw_geometric(cfg, rng) {
        out = apply_geometric(&out, g);
    }
    if cfg.color_jitter {
        let c = out.image.channels;
        let gains: Vec<f32> = (0..c).map(|_| rng.random_range(cfg.gain.0..=cfg.gain.1)).collect();
        let offsets: Vec<f32> = (0..c)
            .map(|_| rng.random_range(cfg.offset.0..=cfg.offset.1))
            .collect();
        jitter_bands(&mut out.image, &gains, &offsets);
    }
    out
}
