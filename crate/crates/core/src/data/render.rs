//! Procedural shape rendering with per-domain styles.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;

pub const CLASS_NAMES: [&str; 7] = [
    "circle", "square", "triangle", "cross", "star", "ring", "bar",
];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Radius of a unit-scale shape, in pixels.
const BASE_RADIUS: f64 = 10.0;
const MAX_SHIFT: f64 = 4.0;
/// Largest rotation of a non-symmetric shape, in radians.
const MAX_ANGLE: f64 = PI / 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Photo,
    Cartoon,
    Sketch,
    Art,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Photo, Style::Cartoon, Style::Sketch, Style::Art];

    pub fn name(self) -> &'static str {
        match self {
            Style::Photo => "photo",
            Style::Cartoon => "cartoon",
            Style::Sketch => "sketch",
            Style::Art => "art",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// Per-pixel Gaussian noise over a two-color gradient.
    Noise,
    /// A single flat color.
    Flat,
    /// Plain white paper.
    Blank,
    /// Oriented sinusoidal stripes.
    Sinusoid,
}

/// A rendering domain. Every field is fixed by [`DomainSpec::standard`] for
/// the chosen style; backgrounds never depend on the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub style: Style,
    /// Candidate background base colors.
    pub background_palette: Vec<[u8; 3]>,
    pub texture: Texture,
    /// Candidate shape colors.
    pub shape_palette: Vec<[u8; 3]>,
    pub filled: bool,
    /// Outline width in pixels (0 = no outline).
    pub outline_width: f64,
    /// Standard deviation of additive pixel noise (0-255 scale).
    pub noise: f64,
}

impl DomainSpec {
    pub fn standard(style: Style) -> Self {
        let (background_palette, texture, shape_palette, filled, outline_width, noise) = match style
        {
            Style::Photo => (
                vec![[92, 120, 70], [110, 118, 80]],
                Texture::Noise,
                vec![[200, 60, 50], [60, 80, 190]],
                true,
                0.0,
                6.0,
            ),
            Style::Cartoon => (
                vec![
                    [250, 230, 180],
                    [190, 230, 250],
                    [220, 250, 200],
                    [250, 205, 220],
                ],
                Texture::Flat,
                vec![[230, 70, 60], [70, 100, 230]],
                true,
                2.5,
                0.0,
            ),
            Style::Sketch => (
                vec![[255, 255, 255]],
                Texture::Blank,
                vec![[40, 40, 40], [70, 70, 70]],
                false,
                1.6,
                3.0,
            ),
            Style::Art => (
                vec![[60, 100, 110], [70, 90, 120]],
                Texture::Sinusoid,
                vec![[210, 80, 70], [90, 110, 210]],
                true,
                0.0,
                6.0,
            ),
        };
        Self {
            name: style.name().to_string(),
            style,
            background_palette,
            texture,
            shape_palette,
            filled,
            outline_width,
            noise,
        }
    }

    pub fn all_standard() -> Vec<DomainSpec> {
        Style::ALL.iter().map(|&s| Self::standard(s)).collect()
    }
}

/// One rendered example: `[C, H, W]` pixels plus the foreground mask.
pub(crate) struct Rendered {
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
    /// The same draw with no shape, for mask checks.
    #[cfg_attr(not(test), allow(dead_code))]
    pub background: Vec<u8>,
}

/// Pose of a shape in image coordinates.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn rotation_symmetric(class: usize) -> bool {
    matches!(CLASS_NAMES[class], "circle" | "ring")
}

fn box_sdf(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let dx = x.abs() - hx;
    let dy = y.abs() - hy;
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    outside + dx.max(dy).min(0.0)
}

/// Signed distance to a closed polygon (negative inside).
fn polygon_sdf(x: f64, y: f64, verts: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (ax, ay) = verts[i];
        let (bx, by) = verts[(i + 1) % n];
        let (ex, ey) = (bx - ax, by - ay);
        let (wx, wy) = (x - ax, y - ay);
        let t = ((wx * ex + wy * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let (dx, dy) = (wx - ex * t, wy - ey * t);
        best = best.min(dx * dx + dy * dy);
        if (ay > y) != (by > y) && x < ax + (y - ay) * ex / ey {
            inside = !inside;
        }
    }
    let d = best.sqrt();
    if inside {
        -d
    } else {
        d
    }
}

fn regular_vertices(count: usize, radius_at: impl Fn(usize) -> f64) -> Vec<(f64, f64)> {
    (0..count)
        .map(|i| {
            let a = -PI / 2.0 + TAU * i as f64 / count as f64;
            let r = radius_at(i);
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Signed distance in unit-radius shape coordinates.
fn shape_sdf(class: usize, x: f64, y: f64) -> f64 {
    match CLASS_NAMES[class] {
        "circle" => (x * x + y * y).sqrt() - 0.9,
        "square" => box_sdf(x, y, 0.72, 0.72),
        "triangle" => polygon_sdf(x, y, &regular_vertices(3, |_| 1.0)),
        "cross" => box_sdf(x, y, 0.95, 0.3).min(box_sdf(x, y, 0.3, 0.95)),
        "star" => polygon_sdf(
            x,
            y,
            &regular_vertices(10, |i| if i % 2 == 0 { 1.05 } else { 0.45 }),
        ),
        "ring" => ((x * x + y * y).sqrt() - 0.72).abs() - 0.2,
        "bar" => box_sdf(x, y, 1.0, 0.28),
        other => unreachable!("unknown class {other}"),
    }
}

/// Signed distance in pixels from pixel center `(px, py)`.
fn pixel_sdf(class: usize, pose: &Pose, px: f64, py: f64) -> f64 {
    let (dx, dy) = (px - pose.cx, py - pose.cy);
    let (s, c) = pose.angle.sin_cos();
    // rotate by -angle into shape frame
    let (u, v) = (
        (c * dx + s * dy) / pose.radius,
        (-s * dx + c * dy) / pose.radius,
    );
    shape_sdf(class, u, v) * pose.radius
}

fn pick<R: Rng + ?Sized>(rng: &mut R, palette: &[[u8; 3]]) -> [f64; 3] {
    let c = palette[rng.random_range(0..palette.len())];
    c.map(f64::from)
}

fn jitter_color<R: Rng + ?Sized>(rng: &mut R, mut c: [f64; 3], amount: f64) -> [f64; 3] {
    for v in &mut c {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 255.0);
    }
    c
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders one example of `class` in the style of `spec`.
pub(crate) fn render<R: Rng + ?Sized>(spec: &DomainSpec, class: usize, rng: &mut R) -> Rendered {
    let n = IMAGE_SIZE;
    let center = n as f64 / 2.0;
    let pose = Pose {
        cx: center + rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        cy: center + rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        radius: BASE_RADIUS * rng.random_range(0.7..=1.1),
        angle: if rotation_symmetric(class) {
            0.0
        } else {
            rng.random_range(-MAX_ANGLE..=MAX_ANGLE)
        },
    };

    // Background is drawn from its own parameters only.
    let base = pick(rng, &spec.background_palette);
    let base = jitter_color(rng, base, 12.0);
    let mut background = vec![[0.0f64; 3]; n * n];
    match spec.texture {
        Texture::Blank => background.iter_mut().for_each(|p| *p = base),
        Texture::Flat => background.iter_mut().for_each(|p| *p = base),
        Texture::Noise => {
            let other = pick(rng, &spec.background_palette);
            let other = jitter_color(rng, other, 12.0);
            let dir = rng.random_range(0.0..TAU);
            let (s, c) = dir.sin_cos();
            for y in 0..n {
                for x in 0..n {
                    let t = (((x as f64 - center) * c + (y as f64 - center) * s) / n as f64 + 0.5)
                        .clamp(0.0, 1.0);
                    let mut px = [0.0; 3];
                    for ch in 0..3 {
                        px[ch] = base[ch] * (1.0 - t) + other[ch] * t;
                    }
                    background[y * n + x] = px;
                }
            }
        }
        Texture::Sinusoid => {
            let freq = rng.random_range(0.35..0.8);
            let dir = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..TAU);
            let (s, c) = dir.sin_cos();
            for y in 0..n {
                for x in 0..n {
                    let w = (freq * (x as f64 * c + y as f64 * s) + phase).sin();
                    background[y * n + x] = base.map(|v| v + 12.0 * w);
                }
            }
        }
    }

    let fill = pick(rng, &spec.shape_palette);
    let fill = jitter_color(rng, fill, 15.0);
    let outline = [25.0, 25.0, 30.0];
    let stripe = (
        rng.random_range(0.5..1.0),
        rng.random_range(0.0..PI),
        rng.random_range(0.0..TAU),
    );
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("positive noise"));

    let mut pixels = vec![0u8; CHANNELS * n * n];
    let mut mask = vec![false; n * n];
    let mut bg_pixels = vec![0u8; CHANNELS * n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let d = pixel_sdf(class, &pose, x as f64 + 0.5, y as f64 + 0.5);
            let half = spec.outline_width / 2.0;
            let on_outline = spec.outline_width > 0.0 && d.abs() <= half;
            let inside = spec.filled && d <= 0.0;
            let color = if on_outline {
                if spec.filled {
                    Some(outline)
                } else {
                    Some(fill)
                }
            } else if inside {
                Some(match spec.texture {
                    Texture::Sinusoid => {
                        let (f, a, p) = stripe;
                        let w = (f * (x as f64 * a.cos() + y as f64 * a.sin()) + p).sin();
                        fill.map(|v| v + 12.0 * w)
                    }
                    _ => fill,
                })
            } else {
                None
            };
            let bg = background[i];
            let px = color.unwrap_or(bg);
            // noise is shared by background and shape so masks stay exact
            let mut out = [0u8; 3];
            let mut bg_out = [0u8; 3];
            for ch in 0..3 {
                let eps = noise.map(|nz| nz.sample(rng)).unwrap_or(0.0);
                out[ch] = to_u8(px[ch] + eps);
                bg_out[ch] = to_u8(bg[ch] + eps);
                pixels[ch * n * n + i] = out[ch];
                bg_pixels[ch * n * n + i] = bg_out[ch];
            }
            mask[i] = color.is_some() && out != bg_out;
        }
    }
    Rendered {
        pixels,
        mask,
        background: bg_pixels,
    }
}
