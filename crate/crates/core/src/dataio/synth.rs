//! Parametric toy faces.
//!
//! An identity fixes face geometry, skin tone and a faint high-frequency skin
//! texture; each photo jitters pose, expression, background, exposure, hair
//! shade and sensor noise. Identities share one mean face, so telling them
//! apart takes the fine texture and geometry cues rather than flat colour,
//! which is what makes small perturbations matter.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FaceImage, IdentityCorpus, ImageShape};
use crate::error::{Error, Result};

type Rgb = [f32; 3];

/// One oriented sinusoid in face coordinates.
#[derive(Debug, Clone)]
struct Grating {
    freq: (f32, f32),
    phase: f32,
    amplitude: Rgb,
}

#[derive(Debug, Clone)]
struct FaceParams {
    skin: Rgb,
    hair: Rgb,
    eye: Rgb,
    mouth: Rgb,
    radii: (f32, f32),
    hair_height: f32,
    eye_offset: (f32, f32),
    eye_radius: f32,
    mouth_offset: f32,
    mouth_size: (f32, f32),
    texture: Vec<Grating>,
}

fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Rgb {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

impl FaceParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let rx = rng.random_range(0.36..0.42);
        let ry = rng.random_range(0.42..0.48);
        let base = rng.random_range(0.55..0.8);
        let texture = (0..3)
            .map(|_| {
                let cycles = rng.random_range(5.0..11.0f32);
                let angle = rng.random_range(0.0..std::f32::consts::PI);
                Grating {
                    freq: (cycles * angle.cos(), cycles * angle.sin()),
                    phase: rng.random_range(0.0..TAU),
                    amplitude: color(rng, 0.015, 0.05),
                }
            })
            .collect();
        Self {
            skin: [base + 0.08, base, base - 0.08].map(|v| v + rng.random_range(-0.05..0.05)),
            hair: color(rng, 0.05, 0.5),
            eye: color(rng, 0.05, 0.35),
            mouth: [rng.random_range(0.45..0.75), rng.random_range(0.15..0.35), rng.random_range(0.15..0.35)],
            radii: (rx, ry),
            hair_height: rng.random_range(0.04..0.1),
            eye_offset: (
                rx * rng.random_range(0.35..0.5),
                ry * rng.random_range(0.2..0.35),
            ),
            eye_radius: rng.random_range(0.04..0.06),
            mouth_offset: ry * rng.random_range(0.4..0.55),
            mouth_size: (rng.random_range(0.08..0.14), rng.random_range(0.025..0.04)),
            texture,
        }
    }
}

/// Anti-aliased coverage of an axis-aligned ellipse at point `(u, v)`.
fn ellipse(u: f32, v: f32, c: (f32, f32), r: (f32, f32), pixel: f32) -> f32 {
    let q = (((u - c.0) / r.0).powi(2) + ((v - c.1) / r.1).powi(2)).sqrt();
    let signed = (q - 1.0) * r.0.min(r.1);
    (0.5 - signed / pixel).clamp(0.0, 1.0)
}

fn blend(dst: &mut Rgb, src: Rgb, alpha: f32) {
    for c in 0..3 {
        dst[c] += (src[c] - dst[c]) * alpha;
    }
}

/// Per-photo variation.
struct Jitter {
    center: (f32, f32),
    scale: f32,
    gain: f32,
    offset: f32,
    background: Rgb,
    hair_shade: f32,
    eye_scale: f32,
    mouth_scale: f32,
}

impl Jitter {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            center: (rng.random_range(0.47..0.53), rng.random_range(0.5..0.56)),
            scale: rng.random_range(0.94..1.06),
            gain: rng.random_range(0.85..1.15),
            offset: rng.random_range(-0.05..0.05),
            background: {
                let grey = rng.random_range(0.3..0.7);
                color(rng, -0.05, 0.05).map(|t| grey + t)
            },
            hair_shade: rng.random_range(0.8..1.2),
            eye_scale: rng.random_range(0.85..1.15),
            mouth_scale: rng.random_range(0.8..1.2),
        }
    }
}

fn render(p: &FaceParams, j: &Jitter, shape: ImageShape, noise: &mut impl FnMut() -> f32) -> Result<FaceImage> {
    let (h, w) = (shape.height, shape.width);
    let pixel = 1.0 / w.max(h) as f32;
    let mut data = Vec::with_capacity(shape.len());
    let (cx, cy) = j.center;
    let (rx, ry) = (p.radii.0 * j.scale, p.radii.1 * j.scale);
    let hair = p.hair.map(|v| (v * j.hair_shade).min(1.0));
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 + 0.5) / w as f32;
            let v = (y as f32 + 0.5) / h as f32;
            let mut px = j.background;
            let hair_c = (cx, cy - p.hair_height * 0.6);
            blend(&mut px, hair, ellipse(u, v, hair_c, (rx * 1.08, ry + p.hair_height * 0.5), pixel));
            // skin texture lives in face coordinates so it moves with the face
            let (fu, fv) = ((u - cx) / j.scale, (v - cy) / j.scale);
            let mut skin = p.skin;
            for g in &p.texture {
                let wave = (TAU * (g.freq.0 * fu + g.freq.1 * fv) + g.phase).sin();
                for c in 0..3 {
                    skin[c] += g.amplitude[c] * wave;
                }
            }
            blend(&mut px, skin, ellipse(u, v, (cx, cy), (rx, ry), pixel));
            let er = p.eye_radius * j.scale * j.eye_scale;
            let (ex, ey) = (p.eye_offset.0 * j.scale, p.eye_offset.1 * j.scale);
            blend(&mut px, p.eye, ellipse(u, v, (cx - ex, cy - ey), (er, er), pixel));
            blend(&mut px, p.eye, ellipse(u, v, (cx + ex, cy - ey), (er, er), pixel));
            let nose = [p.skin[0] * 0.85, p.skin[1] * 0.8, p.skin[2] * 0.8];
            blend(&mut px, nose, ellipse(u, v, (cx, cy + 0.02 * j.scale), (0.03 * j.scale, 0.06 * j.scale), pixel));
            let (mw, mh) = (p.mouth_size.0 * j.scale * j.mouth_scale, p.mouth_size.1 * j.scale);
            blend(&mut px, p.mouth, ellipse(u, v, (cx, cy + p.mouth_offset * j.scale), (mw, mh), pixel));
            let lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for c in 0..shape.channels {
                let base = if shape.channels == 3 { px[c] } else { lum };
                data.push(base * j.gain + j.offset + noise());
            }
        }
    }
    FaceImage::from_clamped(shape, data)
}

/// Generates `n_identities` toy identities with `n_images` images each.
///
/// Identity `k` draws its appearance from its own ChaCha stream, so the first
/// identities of a larger corpus match a smaller corpus with the same seed.
pub fn synth_corpus(
    n_identities: usize,
    n_images: usize,
    shape: ImageShape,
    seed: u64,
) -> Result<IdentityCorpus> {
    if n_identities == 0 || n_images == 0 || shape.is_empty() {
        return Err(Error::precondition("synthetic corpus counts must be at least 1"));
    }
    let width = n_identities.to_string().len().max(4);
    let mut corpus = IdentityCorpus::new(shape);
    let noise_dist = Normal::new(0.0f32, 0.01).expect("valid sigma");
    for k in 0..n_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let params = FaceParams::sample(&mut rng);
        let mut images = Vec::with_capacity(n_images);
        let mut names = Vec::with_capacity(n_images);
        for i in 0..n_images {
            let jitter = Jitter::sample(&mut rng);
            let mut noise = || noise_dist.sample(&mut rng);
            images.push(render(&params, &jitter, shape, &mut noise)?);
            names.push(format!("{i:03}.png"));
        }
        corpus.insert(format!("id{k:0width$}"), names, images)?;
    }
    Ok(corpus)
}
