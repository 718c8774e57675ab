//! Deterministic synthetic test images.
//!
//! Six generators covering the content classes the codec must handle:
//! smooth ramps, soft blobs, periodic texture, plasma interference, noisy
//! walks, and hard edges. Same arguments, same bytes — every fixture is
//! reproducible without carrying binary assets in the repository.

use crate::bitplane::RgbImage;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    /// Linear ramps with a different orientation per channel.
    Gradient,
    /// Soft-edged disks over a dim background.
    Disks,
    /// Sinusoidal stripes at channel-specific angles.
    Stripes,
    /// Sum-of-sines interference pattern.
    Plasma,
    /// Random-walk rows smoothed vertically; film-grain-like.
    Walk,
    /// Coarse checkerboard with one high-frequency quadrant.
    Checker,
}

impl Fixture {
    pub const ALL: [Fixture; 6] = [
        Fixture::Gradient,
        Fixture::Disks,
        Fixture::Stripes,
        Fixture::Plasma,
        Fixture::Walk,
        Fixture::Checker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fixture::Gradient => "gradient",
            Fixture::Disks => "disks",
            Fixture::Stripes => "stripes",
            Fixture::Plasma => "plasma",
            Fixture::Walk => "walk",
            Fixture::Checker => "checker",
        }
    }

    pub fn by_name(name: &str) -> Option<Fixture> {
        Fixture::ALL.iter().copied().find(|f| f.name() == name)
    }
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render a fixture at the given size.
pub fn render(kind: Fixture, height: usize, width: usize) -> RgbImage {
    let mut img = RgbImage::filled(height, width, 0);
    let (hf, wf) = (height.max(2) as f64 - 1.0, width.max(2) as f64 - 1.0);
    match kind {
        Fixture::Gradient => {
            for y in 0..height {
                for x in 0..width {
                    let (u, v) = (x as f64 / wf, y as f64 / hf);
                    img.set(y, x, 0, byte(u));
                    img.set(y, x, 1, byte(v));
                    img.set(y, x, 2, byte(0.5 * (u + v)));
                }
            }
        }
        Fixture::Disks => {
            let centers = [(0.3, 0.3, 0.25), (0.7, 0.6, 0.3), (0.2, 0.8, 0.15)];
            for y in 0..height {
                for x in 0..width {
                    let (u, v) = (x as f64 / wf, y as f64 / hf);
                    for (c, &(cx, cy, r)) in centers.iter().enumerate() {
                        let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                        // soft falloff over 20% of the radius
                        let t = 1.0 - ((d - r) / (0.2 * r)).clamp(0.0, 1.0);
                        img.set(y, x, c, byte(0.15 + 0.7 * t));
                    }
                }
            }
        }
        Fixture::Stripes => {
            for y in 0..height {
                for x in 0..width {
                    let (u, v) = (x as f64 / wf, y as f64 / hf);
                    let a = 0.5 + 0.5 * (12.0 * u).sin();
                    let b = 0.5 + 0.5 * (9.0 * (u + v)).sin();
                    let c = 0.5 + 0.5 * (15.0 * v).sin();
                    img.set(y, x, 0, byte(a));
                    img.set(y, x, 1, byte(b));
                    img.set(y, x, 2, byte(c));
                }
            }
        }
        Fixture::Plasma => {
            for y in 0..height {
                for x in 0..width {
                    let (u, v) = (x as f64 / wf * 8.0, y as f64 / hf * 8.0);
                    let w0 = (u.sin() + v.cos() + ((u + v) * 0.7).sin()) / 3.0;
                    let w1 = ((u * 1.3).cos() + (v * 0.8).sin()) / 2.0;
                    img.set(y, x, 0, byte(0.5 + 0.5 * w0));
                    img.set(y, x, 1, byte(0.5 + 0.5 * w1));
                    img.set(y, x, 2, byte(0.5 + 0.25 * (w0 - w1)));
                }
            }
        }
        Fixture::Walk => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_1234);
            let mut rows = vec![vec![[0f64; 3]; width]; height];
            for row in rows.iter_mut() {
                let mut level = [0.5f64; 3];
                for px in row.iter_mut() {
                    for (c, l) in level.iter_mut().enumerate() {
                        *l = (*l + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.95);
                        px[c] = *l;
                    }
                }
            }
            for y in 0..height {
                for x in 0..width {
                    for c in 0..3 {
                        // 3-tap vertical smoothing keeps grain but adds
                        // inter-row correlation
                        let above = rows[y.saturating_sub(1)][x][c];
                        let below = rows[(y + 1).min(height - 1)][x][c];
                        let v = 0.25 * above + 0.5 * rows[y][x][c] + 0.25 * below;
                        img.set(y, x, c, byte(v));
                    }
                }
            }
        }
        Fixture::Checker => {
            let coarse = (height.min(width) / 4).max(1);
            for y in 0..height {
                for x in 0..width {
                    let fine = y < height / 2 && x < width / 2;
                    let cell = if fine { 1 } else { coarse };
                    let on = (y / cell + x / cell) % 2 == 0;
                    let v = if on { 0.85 } else { 0.2 };
                    img.set(y, x, 0, byte(v));
                    img.set(y, x, 1, byte(if on { 0.7 } else { 0.3 }));
                    img.set(y, x, 2, byte(if on { 0.25 } else { 0.75 }));
                }
            }
        }
    }
    img
}

/// The full corpus at one size, name first.
pub fn corpus(height: usize, width: usize) -> Vec<(&'static str, RgbImage)> {
    Fixture::ALL
        .iter()
        .map(|&k| (k.name(), render(k, height, width)))
        .collect()
}
