//! Seeded synthetic binary segmentation domains with controllable appearance shift.
//!
//! Geometry (the ellipses that make up the mask) is drawn from the spec seed's
//! geometry stream, appearance (texture phase, noise) from its appearance
//! stream. Two specs sharing a seed therefore share every mask.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, usage, Result};
use crate::math;
use crate::metrics::Mask;
use crate::rng::{stream_rng, Stream};
use crate::Error;

/// Allowed foreground fraction of every mask.
pub const FG_MIN: f64 = 0.02;
pub const FG_MAX: f64 = 0.5;
/// Geometry redraws before giving up on a sample.
pub const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainSpec {
    pub seed: u64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub texture_freq: f64,
    pub texture_amplitude: f64,
    pub invert_contrast: bool,
    pub blur_radius: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub image_size: usize,
    pub foreground_level: f64,
    pub background_level: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            seed: 0,
            gamma: 1.0,
            noise_sigma: 0.0,
            texture_freq: 0.0,
            texture_amplitude: 0.0,
            invert_contrast: false,
            blur_radius: 0,
            shapes_min: 1,
            shapes_max: 3,
            image_size: 32,
            foreground_level: 0.7,
            background_level: 0.3,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let levels_ok = (0.0..=1.0).contains(&self.foreground_level) && (0.0..=1.0).contains(&self.background_level);
        if !(self.gamma > 0.0)
            || !(self.noise_sigma >= 0.0)
            || !(self.texture_freq >= 0.0)
            || !self.texture_amplitude.is_finite()
            || self.shapes_min == 0
            || self.shapes_max < self.shapes_min
            || self.image_size < 4
            || !levels_ok
        {
            return Err(config_err!("invalid domain spec {:?}", self));
        }
        Ok(())
    }
}

/// One `(image, mask)` pair; the image is row-major in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub mask: Mask,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.mask.width()
    }
}

fn draw_mask<R: RngCore>(spec: &DomainSpec, rng: &mut R) -> Mask {
    let size = spec.image_size;
    let s = size as f64;
    let count = rng.random_range(spec.shapes_min..=spec.shapes_max);
    let mut mask = Mask::empty(size, size);
    for _ in 0..count {
        let cy = rng.random_range(0.15 * s..0.85 * s);
        let cx = rng.random_range(0.15 * s..0.85 * s);
        let ry = rng.random_range(0.08 * s..0.25 * s);
        let rx = rng.random_range(0.08 * s..0.25 * s);
        let theta = rng.random_range(0.0..core::f64::consts::PI);
        let (st, ct) = (math::sin(theta), math::cos(theta));
        for r in 0..size {
            for c in 0..size {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                let u = (dx * ct + dy * st) / rx;
                let v = (-dx * st + dy * ct) / ry;
                if u * u + v * v <= 1.0 {
                    mask.set(r, c, true);
                }
            }
        }
    }
    mask
}

fn box_blur(image: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; image.len()];
    for r in 0..size {
        for c in 0..size {
            let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(size - 1));
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(size - 1));
            let mut s = 0.0;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    s += image[rr * size + cc];
                }
            }
            out[r * size + c] = s / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

/// Sample `index` of the domain, a pure function of `(spec, index)`.
pub fn generate_sample(spec: &DomainSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut geo = stream_rng(spec.seed, Stream::Geometry, index);
    let mask = (0..MAX_RETRIES)
        .map(|_| draw_mask(spec, &mut geo))
        .find(|m| (FG_MIN..=FG_MAX).contains(&m.fraction()))
        .ok_or_else(|| {
            Error::Generation(alloc::format!(
                "no mask within [{}, {}] foreground after {} draws (sample {})",
                FG_MIN,
                FG_MAX,
                MAX_RETRIES,
                index
            ))
        })?;

    let size = spec.image_size;
    let mut app = stream_rng(spec.seed, Stream::Appearance, index);
    let angle = app.random_range(0.0..core::f64::consts::PI);
    let phase = app.random_range(0.0..core::f64::consts::TAU);
    let (sa, ca) = (math::sin(angle), math::cos(angle));
    let w = core::f64::consts::TAU * spec.texture_freq / size as f64;
    let mut image: Vec<f64> = (0..size * size)
        .map(|p| {
            let (r, c) = ((p / size) as f64, (p % size) as f64);
            let v = if mask.get(p / size, p % size) {
                spec.foreground_level
            } else {
                spec.background_level + spec.texture_amplitude * math::sin(w * (c * ca + r * sa) + phase)
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    if spec.gamma != 1.0 {
        image.iter_mut().for_each(|v| *v = math::powf(*v, spec.gamma));
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| config_err!("noise: {}", e))?;
        image.iter_mut().for_each(|v| *v += normal.sample(&mut app));
    }
    if spec.blur_radius > 0 {
        image = box_blur(&image, size, spec.blur_radius);
    }
    if spec.invert_contrast {
        image.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Sample { image, mask })
}

pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(usage!("a domain needs at least one sample"));
    }
    (0..n as u64).map(|i| generate_sample(spec, i)).collect()
}

/// `T` specs of increasing appearance shift. Both intensity levels rise
/// across the sequence, so the background of the last domain is about as
/// bright as the foreground of the first; noise and texture grow with it.
pub fn default_sequence(t: usize, master_seed: u64, image_size: usize) -> Result<Vec<DomainSpec>> {
    if t < 2 {
        return Err(config_err!("a domain sequence needs T >= 2, got {}", t));
    }
    let mut seeds = stream_rng(master_seed, Stream::DomainSeeds, 0);
    Ok((0..t)
        .map(|d| {
            let s = d as f64 / (t - 1) as f64;
            DomainSpec {
                seed: seeds.next_u64(),
                gamma: 1.0 - 0.4 * s,
                noise_sigma: 0.02 + 0.06 * s,
                texture_freq: 1.0 + 5.0 * s,
                texture_amplitude: 0.05 + 0.1 * s,
                blur_radius: usize::from(s > 0.0 && s < 1.0),
                foreground_level: 0.5 + 0.3 * s,
                background_level: 0.2 + 0.3 * s,
                image_size,
                ..DomainSpec::default()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.6, val: 0.15, test: 0.25 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(config_err!("split ratios {:?} must be non-negative and sum to 1", self));
        }
        Ok(())
    }
}

/// Index sets of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then `val = round(n val)`, `test = round(n test)`, train takes the rest.
pub fn split_indices(n: usize, spec: &SplitSpec, seed: u64) -> Result<SplitIndices> {
    spec.validate()?;
    if n < 4 {
        return Err(usage!("splitting needs at least 4 samples, got {}", n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let val = math::round(spec.val * n as f64) as usize;
    let test = (math::round(spec.test * n as f64) as usize).min(n - val);
    let train = n - val - test;
    Ok(SplitIndices {
        train: order[..train].to_vec(),
        val: order[train..train + val].to_vec(),
        test: order[train + val..].to_vec(),
    })
}

pub fn split<T: Clone>(dataset: &[T], spec: &SplitSpec, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let idx = split_indices(dataset.len(), spec, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect();
    Ok((pick(&idx.train), pick(&idx.val), pick(&idx.test)))
}
