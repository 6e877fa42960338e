//! Procedural class-conditional image sets.
//!
//! Each class pairs a shape grammar with its own hue band, so classes are
//! separable both by structure and by mean colour. Item `i` belongs to
//! class `i % num_classes` and is drawn from its own random stream, which
//! makes generation order-independent and parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{Image, LabeledImage, CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Disc,
    HorizontalStripes,
    Square,
    VerticalStripes,
    Ring,
    Checker,
    DiagonalStripes,
    Cross,
}

const PATTERNS: [Pattern; 8] = [
    Pattern::Disc,
    Pattern::HorizontalStripes,
    Pattern::Square,
    Pattern::VerticalStripes,
    Pattern::Ring,
    Pattern::Checker,
    Pattern::DiagonalStripes,
    Pattern::Cross,
];

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledImage>> {
    if spec.num_classes < 2 {
        return Err(Error::invalid(
            "synthetic",
            format!("need at least 2 classes, got {}", spec.num_classes),
        ));
    }
    if spec.size < 8 {
        return Err(Error::invalid("synthetic", format!("image size {} < 8", spec.size)));
    }
    if spec.images_per_class == 0 {
        return Err(Error::invalid("synthetic", "images_per_class must be positive"));
    }
    let total = spec.num_classes * spec.images_per_class;
    (0..total)
        .into_par_iter()
        .map(|i| {
            let label = i % spec.num_classes;
            let mut rng = Rng::stream(spec.seed, i as u64);
            let image = render(label, spec.num_classes, spec.size, &mut rng)?;
            Ok(LabeledImage { image, label })
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = h.floor();
    let f = h - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(label: usize, num_classes: usize, size: usize, rng: &mut Rng) -> Result<Image> {
    let pattern = PATTERNS[label % PATTERNS.len()];
    let hue = label as f64 / num_classes as f64 + rng.range(-0.03, 0.03);
    let fg = hsv_to_rgb(hue, rng.range(0.75, 0.95), rng.range(0.8, 1.0));
    let bg_level = rng.range(0.05, 0.15);
    let bg = [bg_level, bg_level, bg_level];

    let s = size as f64;
    let cx = rng.range(0.35, 0.65) * s;
    let cy = rng.range(0.35, 0.65) * s;
    let radius = rng.range(0.2, 0.32) * s;
    let period = rng.range(4.0, 8.0);
    let phase = rng.range(0.0, period);

    let mut pixels = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let stripe = |u: f64| (u + phase).rem_euclid(period) < period / 2.0;
            let inside = match pattern {
                Pattern::Disc => dx * dx + dy * dy <= radius * radius,
                Pattern::HorizontalStripes => stripe(py),
                Pattern::Square => dx.abs() <= radius && dy.abs() <= radius,
                Pattern::VerticalStripes => stripe(px),
                Pattern::Ring => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= radius && d >= 0.55 * radius
                }
                Pattern::Checker => stripe(px) ^ stripe(py),
                Pattern::DiagonalStripes => stripe((px + py) / std::f64::consts::SQRT_2),
                Pattern::Cross => {
                    let arm = 0.35 * radius;
                    (dx.abs() <= arm && dy.abs() <= radius) || (dy.abs() <= arm && dx.abs() <= radius)
                }
            };
            pixels.extend_from_slice(if inside { &fg } else { &bg });
        }
    }
    Image::new(size, size, pixels)
}
