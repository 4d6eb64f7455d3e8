//! Procedural rendering of extruded-surface backgrounds and defect stamps.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Archetype, DefectClassSpec, PixelBox};

/// Sub-threshold deltas are dropped so a stamp's support is exactly the set of
/// visibly altered pixels.
const VISIBLE_DELTA: f64 = 1.0;

/// Intensity deltas of one defect instance on a local canvas.
pub(crate) struct Stamp {
    pub width: usize,
    pub height: usize,
    pub delta: Vec<f64>,
}

impl Stamp {
    fn from_fn(width: usize, height: usize, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut delta = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x as f64 + 0.5, y as f64 + 0.5);
                delta.push(if v.abs() >= VISIBLE_DELTA { v } else { 0.0 });
            }
        }
        Self {
            width,
            height,
            delta,
        }
    }

    /// Tight box of the nonzero support, local coordinates, half-open.
    pub fn support(&self) -> Option<PixelBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.delta[y * self.width + x] != 0.0 {
                    bounds = Some(match bounds {
                        None => (x, y, x + 1, y + 1),
                        Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1)),
                    });
                }
            }
        }
        bounds.map(|(x1, y1, x2, y2)| PixelBox::new(x1 as u32, y1 as u32, x2 as u32, y2 as u32))
    }
}

/// Horizontal band texture plus low-amplitude white noise.
pub(crate) fn background(width: usize, height: usize, rng: &mut impl Rng) -> Vec<f64> {
    let base = rng.random_range(120.0..160.0);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(2.0..6.0),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let jitter = Normal::new(0.0, 1.5).expect("valid sigma");
    let rows: Vec<f64> = (0..height)
        .map(|y| {
            let y = y as f64;
            let bands: f64 = waves
                .iter()
                .map(|&(amp, freq, phase)| amp * (2.0 * PI * freq * y + phase).sin())
                .sum();
            base + bands + jitter.sample(rng)
        })
        .collect();
    let noise = Normal::new(0.0, 3.0).expect("valid sigma");
    let mut img = Vec::with_capacity(width * height);
    for row in rows {
        for _ in 0..width {
            img.push(row + noise.sample(rng));
        }
    }
    img
}

/// Render one instance of `spec`'s archetype. The stamp canvas is cropped to
/// its support, so `support()` spans the whole canvas.
pub(crate) fn stamp(spec: &DefectClassSpec, rng: &mut impl Rng) -> Stamp {
    let (lo, hi) = spec.size_range;
    let size = rng.random_range(lo..=hi.max(lo)) as f64;
    let contrast = rng.random_range(spec.contrast_range.0..=spec.contrast_range.1) * 255.0;
    let raw = match spec.archetype {
        Archetype::BlobDark => blob(size, -contrast, 0.15, rng),
        Archetype::BrightBlob => bright_blob(size, contrast, rng),
        Archetype::PitCluster => pit_cluster(size, -contrast, rng),
        Archetype::MicroSpot => micro_spot(size.min(MICRO_SPOT_MAX_SIDE as f64), -contrast),
        Archetype::TexturePatch => texture_patch(size, contrast, rng),
        Archetype::ScratchStreak => scratch(size, contrast, rng),
    };
    crop(raw)
}

/// Largest micro spot side in pixels, keeping the box area at most 100 px².
pub const MICRO_SPOT_MAX_SIDE: u32 = 10;

fn crop(s: Stamp) -> Stamp {
    let Some(b) = s.support() else {
        // every archetype paints its centre pixel, so this only guards
        // against pathological parameters
        return Stamp {
            width: 1,
            height: 1,
            delta: vec![-VISIBLE_DELTA * 20.0],
        };
    };
    let (w, h) = (b.width() as usize, b.height() as usize);
    let mut delta = Vec::with_capacity(w * h);
    for y in b.y1 as usize..b.y2 as usize {
        delta.extend_from_slice(&s.delta[y * s.width + b.x1 as usize..][..w]);
    }
    Stamp {
        width: w,
        height: h,
        delta,
    }
}

fn canvas(size: f64) -> usize {
    size.ceil() as usize + 2
}

/// Irregular ellipse with a soft interior.
fn blob(size: f64, amplitude: f64, wobble: f64, rng: &mut impl Rng) -> Stamp {
    let n = canvas(size * (1.0 + wobble));
    let c = n as f64 / 2.0;
    let rx = size / 2.0;
    let ry = rx * rng.random_range(0.6..1.0);
    let theta = rng.random_range(0.0..PI);
    let lobes = rng.random_range(2..5) as f64;
    let psi = rng.random_range(0.0..2.0 * PI);
    let (sin_t, cos_t) = theta.sin_cos();
    Stamp::from_fn(n, n, |x, y| {
        let (dx, dy) = (x - c, y - c);
        let u = dx * cos_t + dy * sin_t;
        let v = -dx * sin_t + dy * cos_t;
        let phi = v.atan2(u);
        let rho = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt() / (1.0 + wobble * (lobes * phi + psi).sin());
        if rho <= 1.0 {
            amplitude * (0.6 + 0.4 * (1.0 - rho * rho))
        } else {
            0.0
        }
    })
}

/// Round bright bump with a Gaussian core.
fn bright_blob(size: f64, amplitude: f64, rng: &mut impl Rng) -> Stamp {
    let n = canvas(size);
    let c = n as f64 / 2.0;
    let r = size / 2.0;
    let squash = rng.random_range(0.8..1.0);
    Stamp::from_fn(n, n, |x, y| {
        let rho2 = ((x - c) / r).powi(2) + ((y - c) / (r * squash)).powi(2);
        if rho2 <= 1.0 {
            amplitude * (0.35 + 0.65 * (-2.0 * rho2).exp())
        } else {
            0.0
        }
    })
}

fn pit_cluster(size: f64, amplitude: f64, rng: &mut impl Rng) -> Stamp {
    let n = canvas(size);
    let count = rng.random_range(3..=7);
    let mut pits: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(2.5..n as f64 - 2.5),
                rng.random_range(2.5..n as f64 - 2.5),
                rng.random_range(1.5..2.5),
            )
        })
        .collect();
    // anchor the cluster at the canvas centre so it is never empty
    let c = n as f64 / 2.0;
    pits.push((c, c, 2.0));
    Stamp::from_fn(n, n, |x, y| {
        if pits
            .iter()
            .any(|&(px, py, r)| (x - px).powi(2) + (y - py).powi(2) <= r * r)
        {
            amplitude
        } else {
            0.0
        }
    })
}

fn micro_spot(size: f64, amplitude: f64) -> Stamp {
    let n = size.ceil() as usize;
    let c = n as f64 / 2.0;
    let r = size / 2.0;
    Stamp::from_fn(n, n, |x, y| {
        let rho2 = ((x - c).powi(2) + (y - c).powi(2)) / (r * r);
        if rho2 <= 1.0 {
            amplitude * (0.7 + 0.3 * (1.0 - rho2))
        } else {
            0.0
        }
    })
}

/// Ellipse filled with a fine bumpy pattern of both signs.
fn texture_patch(size: f64, amplitude: f64, rng: &mut impl Rng) -> Stamp {
    let n = canvas(size);
    let c = n as f64 / 2.0;
    let rx = size / 2.0;
    let ry = rx * rng.random_range(0.7..1.0);
    let period = rng.random_range(3.0..4.5);
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    Stamp::from_fn(n, n, |x, y| {
        let rho2 = ((x - c) / rx).powi(2) + ((y - c) / ry).powi(2);
        if rho2 > 1.0 {
            return 0.0;
        }
        let bump = (2.0 * PI * x / period + px).sin() * (2.0 * PI * y / period + py).sin();
        // keep the patch visible even where the bump pattern crosses zero
        let sign = if bump >= 0.0 { 1.0 } else { -1.0 };
        amplitude * (0.25 * sign + 0.75 * bump)
    })
}

/// Thin slanted bright streak.
fn scratch(length: f64, amplitude: f64, rng: &mut impl Rng) -> Stamp {
    let angle = rng.random_range(25f64.to_radians()..65f64.to_radians());
    let flip = rng.random_bool(0.5);
    let (sin_a, cos_a) = angle.sin_cos();
    let w = (length * cos_a).ceil() as usize + 4;
    let h = (length * sin_a).ceil() as usize + 4;
    let (x0, y0) = (2.0, if flip { h as f64 - 2.0 } else { 2.0 });
    let (ux, uy) = (cos_a, if flip { -sin_a } else { sin_a });
    Stamp::from_fn(w, h, |x, y| {
        let (dx, dy) = (x - x0, y - y0);
        let t = (dx * ux + dy * uy).clamp(0.0, length);
        let dist = ((dx - t * ux).powi(2) + (dy - t * uy).powi(2)).sqrt();
        if dist <= 1.0 {
            amplitude
        } else if dist <= 1.8 {
            amplitude * (1.8 - dist) / 0.8
        } else {
            0.0
        }
    })
}
