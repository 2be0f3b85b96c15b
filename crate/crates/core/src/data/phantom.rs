//! Synthetic T1-like slices with punctate lesions and ground truth.
//!
//! Each volume is an elliptical head: a bright rim, a grey interior with a
//! darker white-matter annulus ("band"), smooth texture and pixel noise.
//! Lesions are Gaussian bumps centred inside the band that persist over 1-3
//! consecutive slices, each slice shifting the centre by at most one whole
//! pixel along one axis (any two slices stay within 2 px). The mask is the set
//! of pixels where a bump exceeds half its peak. Bright distractors (a rim
//! artifact, a hemorrhage-like blob) sit outside the band.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{MaskVolume, Volume};
use crate::error::{Error, Result};

/// Intensity scale of the written volumes (arbitrary scanner units).
const SCALE: f64 = 1000.0;
const AIR: f64 = 0.02;
const RIM: f64 = 0.85;
const GREY: f64 = 0.40;
const WHITE: f64 = 0.30;
const VENTRICLE: f64 = 0.18;
/// Normalized elliptical radius bounds of the regions.
const RIM_START: f64 = 0.88;
const BAND: (f64, f64) = (0.42, 0.70);
const VENTRICLE_END: f64 = 0.18;
const TEXTURE_AMPLITUDE: f64 = 0.04;
const NOISE_STD: f64 = 0.015;
/// Distractor support is where its profile exceeds this fraction of the peak.
const SUPPORT_LEVEL: f64 = 0.1;
const MAX_ATTEMPTS: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// In-plane size (square).
    pub size: usize,
    pub slices: usize,
    /// Inclusive lesion count range.
    pub lesions: (usize, usize),
    /// Half-peak (mask) radius range in pixels.
    pub radius: (f64, f64),
    /// Inclusive cross-slice extent range.
    pub extent: (usize, usize),
    /// Lesion peak above the local tissue, in units of the full intensity scale.
    pub gain: f64,
    pub distractors: usize,
    /// Gaussian sigma (px) of the background texture.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            slices: 8,
            lesions: (3, 6),
            radius: (1.2, 2.2),
            extent: (1, 3),
            gain: 0.35,
            distractors: 2,
            smoothness: 3.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 16 {
            return bad(format!(
                "phantom size must be at least 16, got {}",
                self.size
            ));
        }
        if self.slices == 0 {
            return bad("phantom needs at least one slice".into());
        }
        if self.lesions.0 > self.lesions.1 {
            return bad(format!("lesion count range {:?} is empty", self.lesions));
        }
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1 && self.radius.1.is_finite()) {
            return bad(format!(
                "lesion radius range {:?} must satisfy 1 <= lo <= hi",
                self.radius
            ));
        }
        if self.extent.0 == 0 || self.extent.0 > self.extent.1 || self.extent.1 > self.slices {
            return bad(format!(
                "lesion extent range {:?} must lie in [1, {}]",
                self.extent, self.slices
            ));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return bad(format!("lesion gain must be positive, got {}", self.gain));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return bad(format!(
                "texture smoothness must be positive, got {}",
                self.smoothness
            ));
        }
        Ok(())
    }
}

/// Generator output together with its region maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: MaskVolume,
    /// In-plane white-matter band map, shared by all slices.
    pub band: Vec<u8>,
    pub distractors: MaskVolume,
}

struct Head {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
}

impl Head {
    fn rho(&self, y: f64, x: f64) -> f64 {
        (((y - self.cy) / self.ay).powi(2) + ((x - self.cx) / self.ax).powi(2)).sqrt()
    }
}

/// A Gaussian bump on a run of slices; `centres[i]` belongs to slice `first + i`.
struct Blob {
    first: usize,
    centres: Vec<(f64, f64)>,
    sigma: f64,
    peak: f64,
}

impl Blob {
    fn value(&self, c: (f64, f64), y: usize, x: usize) -> f64 {
        let d2 = (y as f64 - c.0).powi(2) + (x as f64 - c.1).powi(2);
        self.peak * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Pixels of slice-local centre `c` where the profile exceeds `level * peak`.
    fn pixels(&self, c: (f64, f64), level: f64, size: usize) -> Vec<(usize, usize)> {
        let reach = self.sigma * (2.0 * (1.0 / level).ln()).sqrt() + 1.0;
        let lo = |v: f64| (v - reach).floor().max(0.0) as usize;
        let hi = |v: f64| ((v + reach).ceil() as usize).min(size - 1);
        let mut out = Vec::new();
        for y in lo(c.0)..=hi(c.0) {
            for x in lo(c.1)..=hi(c.1) {
                if self.value(c, y, x) > level * self.peak {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, depth) = (cfg.size, cfg.slices);
    let half = (n as f64 - 1.0) / 2.0;
    let head = Head {
        cy: half + rng.random_range(-1.0..=1.0),
        cx: half + rng.random_range(-1.0..=1.0),
        ay: n as f64 * rng.random_range(0.44..0.47),
        ax: n as f64 * rng.random_range(0.39..0.43),
    };
    let rho: Vec<f64> = (0..n * n)
        .map(|i| head.rho((i / n) as f64, (i % n) as f64))
        .collect();
    let band: Vec<u8> = rho
        .iter()
        .map(|&r| u8::from((BAND.0..=BAND.1).contains(&r)))
        .collect();

    let lesion_count = rng.random_range(cfg.lesions.0..=cfg.lesions.1);
    let mut lesions = Vec::with_capacity(lesion_count);
    for index in 0..lesion_count {
        lesions.push(place_lesion(cfg, &band, &mut rng).ok_or_else(|| {
            Error::Generation(format!(
                "could not place lesion {} with its half-peak mask inside the white-matter band after {MAX_ATTEMPTS} attempts",
                index + 1
            ))
        })?);
    }
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for index in 0..cfg.distractors {
        let blob = place_distractor(cfg, &head, &rho, &band, index, &mut rng).ok_or_else(|| {
            Error::Generation(format!(
                "could not place distractor {} outside the white-matter band after {MAX_ATTEMPTS} attempts",
                index + 1
            ))
        })?;
        distractors.push(blob);
    }

    let common = texture(n, cfg.smoothness, &mut rng);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut volume = Volume::filled(depth, n, n, 0.0);
    let mut mask = MaskVolume::filled(depth, n, n, 0);
    let mut distractor_map = MaskVolume::filled(depth, n, n, 0);
    for d in 0..depth {
        let own = texture(n, cfg.smoothness, &mut rng);
        let mut slice: Vec<f64> = (0..n * n)
            .map(|i| {
                let r = rho[i];
                let base = if r > 1.0 {
                    AIR
                } else if r > RIM_START {
                    RIM
                } else if band[i] != 0 {
                    WHITE
                } else if r < VENTRICLE_END {
                    VENTRICLE
                } else {
                    GREY
                };
                let tex = if r <= RIM_START {
                    TEXTURE_AMPLITUDE * (0.7 * common[i] + 0.3 * own[i])
                } else {
                    0.0
                };
                base + tex + noise.sample(&mut rng)
            })
            .collect();
        for (blobs, map, level) in [
            (&lesions, &mut mask, 0.5),
            (&distractors, &mut distractor_map, SUPPORT_LEVEL),
        ] {
            let out = map.slice_mut(d);
            for b in blobs
                .iter()
                .filter(|b| (b.first..b.first + b.centres.len()).contains(&d))
            {
                let c = b.centres[d - b.first];
                for (y, x) in b.pixels(c, 1e-4, n) {
                    slice[y * n + x] += b.value(c, y, x);
                }
                for (y, x) in b.pixels(c, level, n) {
                    out[y * n + x] = 1;
                }
            }
        }
        for (dst, v) in volume.slice_mut(d).iter_mut().zip(slice) {
            *dst = (v.max(0.0) * SCALE) as f32;
        }
    }
    Ok(Phantom {
        volume,
        mask,
        band,
        distractors: distractor_map,
    })
}

fn place_lesion(cfg: &PhantomConfig, band: &[u8], rng: &mut ChaCha8Rng) -> Option<Blob> {
    let n = cfg.size;
    for _ in 0..MAX_ATTEMPTS {
        let extent = rng.random_range(cfg.extent.0..=cfg.extent.1);
        let first = rng.random_range(0..=cfg.slices - extent);
        let radius = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let sigma = radius / (2.0 * std::f64::consts::LN_2).sqrt();
        let peak = cfg.gain * rng.random_range(0.85..1.15);
        let base = (
            rng.random_range(0.0..n as f64),
            rng.random_range(0.0..n as f64),
        );
        let centres = (0..extent)
            .map(|i| {
                const STEPS: [(f64, f64); 5] =
                    [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
                let (dy, dx) = if i == 0 {
                    STEPS[0]
                } else {
                    STEPS[rng.random_range(0..STEPS.len())]
                };
                (base.0 + dy, base.1 + dx)
            })
            .collect();
        let blob = Blob {
            first,
            centres,
            sigma,
            peak,
        };
        let fits = blob.centres.iter().all(|&c| {
            let px = blob.pixels(c, 0.5, n);
            !px.is_empty() && px.iter().all(|&(y, x)| band[y * n + x] != 0)
        });
        if fits {
            return Some(blob);
        }
    }
    None
}

fn place_distractor(
    cfg: &PhantomConfig,
    head: &Head,
    rho: &[f64],
    band: &[u8],
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Blob> {
    let n = cfg.size;
    // Alternate rim artifacts and hemorrhage-like blobs in the deep interior.
    let (zone, sigma_range, gain) = if index.is_multiple_of(2) {
        ((0.86, 0.97), (0.8, 1.3), 1.3)
    } else {
        ((0.0, 0.3), (1.4, 2.2), 1.5)
    };
    for _ in 0..MAX_ATTEMPTS {
        let r = rng.random_range(zone.0..zone.1);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let centre = (
            head.cy + r * head.ay * theta.sin(),
            head.cx + r * head.ax * theta.cos(),
        );
        let extent = rng.random_range(1..=cfg.slices.min(3));
        let blob = Blob {
            first: rng.random_range(0..=cfg.slices - extent),
            centres: vec![centre; extent],
            sigma: rng.random_range(sigma_range.0..sigma_range.1),
            peak: cfg.gain * gain,
        };
        let px = blob.pixels(centre, SUPPORT_LEVEL, n);
        let fits = !px.is_empty()
            && px
                .iter()
                .all(|&(y, x)| band[y * n + x] == 0 && rho[y * n + x] <= 1.0);
        if fits {
            return Some(blob);
        }
    }
    None
}

/// Zero-mean, unit-peak smooth noise field.
fn texture(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = gaussian_blur(&white, n, sigma);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let peak = smooth
        .iter()
        .fold(0.0f64, |a, &v| a.max((v - mean).abs()))
        .max(1e-12);
    smooth.iter().map(|v| (v - mean) / peak).collect()
}

fn gaussian_blur(src: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y, clamp(x as isize + o))
                    } else {
                        (clamp(y as isize + o), x)
                    };
                    acc += w * input[yy * n + xx];
                }
                out[y * n + x] = acc / total;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}
