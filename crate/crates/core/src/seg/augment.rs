//! Seeded classical augmentation: joint geometric transforms on image and
//! mask, then intensity-only perturbations of the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ImageMaskPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_flip: f64,
    /// Pad by up to this many pixels, then crop back at a random offset.
    pub max_shift_px: usize,
    pub p_affine: f64,
    pub max_rotate_deg: f64,
    pub max_scale: f64,
    /// Fraction of the image extent.
    pub max_translate: f64,
    pub max_shear_deg: f64,
    pub p_noise: f64,
    pub noise_sd: f64,
    pub p_contrast: f64,
    pub max_contrast: f64,
    pub p_sharpen: f64,
    pub p_blur: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            max_shift_px: 4,
            p_affine: 0.5,
            max_rotate_deg: 10.0,
            max_scale: 0.1,
            max_translate: 0.05,
            max_shear_deg: 5.0,
            p_noise: 0.3,
            noise_sd: 0.02,
            p_contrast: 0.3,
            max_contrast: 0.2,
            p_sharpen: 0.1,
            p_blur: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every operation disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            p_flip: 0.0,
            max_shift_px: 0,
            p_affine: 0.0,
            max_rotate_deg: 0.0,
            max_scale: 0.0,
            max_translate: 0.0,
            max_shear_deg: 0.0,
            p_noise: 0.0,
            noise_sd: 0.0,
            p_contrast: 0.0,
            max_contrast: 0.0,
            p_sharpen: 0.0,
            p_blur: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_flip,
            self.p_affine,
            self.p_noise,
            self.p_contrast,
            self.p_sharpen,
            self.p_blur,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("augmentation probabilities {probs:?}")));
        }
        if !(0.0..1.0).contains(&self.max_scale) || !(0.0..0.5).contains(&self.max_shear_deg.to_radians().tan()) {
            return Err(Error::Config("augmentation scale or shear out of range".into()));
        }
        if self.noise_sd < 0.0 || !(0.0..1.0).contains(&self.max_contrast) {
            return Err(Error::Config("augmentation noise or contrast out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Nearest,
    Bilinear,
}

/// Maps output pixel `(x, y)` to source `(a x + b y + c, d x + e y + f)`;
/// samples outside the image take the nearest edge value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub inverse: [[f64; 3]; 2],
}

impl GeometricTransform {
    pub const IDENTITY: GeometricTransform = GeometricTransform {
        inverse: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    /// `self` applied after `first`, both as forward maps.
    fn then(self, first: GeometricTransform) -> GeometricTransform {
        // inverse of the composition is first⁻¹ ∘ self⁻¹
        let [[a, b, c], [d, e, f]] = first.inverse;
        let [[p, q, r], [s, t, u]] = self.inverse;
        GeometricTransform {
            inverse: [
                [a * p + b * s, a * q + b * t, a * r + b * u + c],
                [d * p + e * s, d * q + e * t, d * r + e * u + f],
            ],
        }
    }

    pub fn det(&self) -> f64 {
        let [[a, b, _], [d, e, _]] = self.inverse;
        a * e - b * d
    }

    pub fn apply(&self, src: &[f32], height: usize, width: usize, mode: Resample) -> Vec<f32> {
        let [[a, b, c], [d, e, f]] = self.inverse;
        let at = |x: isize, y: isize| {
            let x = x.clamp(0, width as isize - 1) as usize;
            let y = y.clamp(0, height as isize - 1) as usize;
            src[y * width + x]
        };
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let u = a * xf + b * yf + c;
                let v = d * xf + e * yf + f;
                out.push(match mode {
                    Resample::Nearest => at(u.round() as isize, v.round() as isize),
                    Resample::Bilinear => {
                        let (u0, v0) = (u.floor(), v.floor());
                        let (fu, fv) = ((u - u0) as f32, (v - v0) as f32);
                        let (i, j) = (u0 as isize, v0 as isize);
                        let top = at(i, j) * (1.0 - fu) + at(i + 1, j) * fu;
                        let bottom = at(i, j + 1) * (1.0 - fu) + at(i + 1, j + 1) * fu;
                        top * (1.0 - fv) + bottom * fv
                    }
                });
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &[u8], height: usize, width: usize) -> Vec<u8> {
        let as_f: Vec<f32> = mask.iter().map(|&v| v as f32).collect();
        self.apply(&as_f, height, width, Resample::Nearest)
            .into_iter()
            .map(|v| v as u8)
            .collect()
    }
}

/// Draw the joint geometric part of the pipeline: pad/crop, flip, affine.
pub fn sample_geometric(
    config: &AugmentConfig,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> GeometricTransform {
    let mut t = GeometricTransform::IDENTITY;
    if config.max_shift_px > 0 {
        let m = config.max_shift_px as i64;
        let dx = rng.gen_range(-m..=m) as f64;
        let dy = rng.gen_range(-m..=m) as f64;
        t = GeometricTransform {
            inverse: [[1.0, 0.0, -dx], [0.0, 1.0, -dy]],
        }
        .then(t);
    }
    if rng.gen_bool(config.p_flip) {
        t = GeometricTransform {
            inverse: [[-1.0, 0.0, width as f64 - 1.0], [0.0, 1.0, 0.0]],
        }
        .then(t);
    }
    if rng.gen_bool(config.p_affine) {
        loop {
            let a = sample_affine(config, height, width, rng);
            if a.det().abs() > 1e-3 {
                t = a.then(t);
                break;
            }
        }
    }
    t
}

fn sample_affine(config: &AugmentConfig, height: usize, width: usize, rng: &mut ChaCha8Rng) -> GeometricTransform {
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let theta = sym(rng, config.max_rotate_deg).to_radians();
    let scale = 1.0 + sym(rng, config.max_scale);
    let shear = sym(rng, config.max_shear_deg).to_radians().tan();
    let tx = sym(rng, config.max_translate) * width as f64;
    let ty = sym(rng, config.max_translate) * height as f64;
    // forward: p' = R S H (p - c) + c + t; stored as its inverse
    let (cs, sn) = (theta.cos(), theta.sin());
    let m = [
        [scale * cs, scale * (cs * shear - sn)],
        [scale * sn, scale * (sn * shear + cs)],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return GeometricTransform { inverse: [[0.0; 3]; 2] };
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (ox, oy) = (cx + tx, cy + ty);
    GeometricTransform {
        inverse: [
            [inv[0][0], inv[0][1], cx - inv[0][0] * ox - inv[0][1] * oy],
            [inv[1][0], inv[1][1], cy - inv[1][0] * ox - inv[1][1] * oy],
        ],
    }
}

fn box_blur(img: &[f32], height: usize, width: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| {
        img[y.clamp(0, height as isize - 1) as usize * width + x.clamp(0, width as isize - 1) as usize]
    };
    let mut out = Vec::with_capacity(img.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(x + dx, y + dy);
                }
            }
            out.push(s / 9.0);
        }
    }
    out
}

/// Image-only noise, contrast, sharpen and blur; results clamped to [0, 1].
pub fn intensity_augment(image: &mut [f32], height: usize, width: usize, config: &AugmentConfig, rng: &mut ChaCha8Rng) {
    if rng.gen_bool(config.p_contrast) && config.max_contrast > 0.0 {
        let k = 1.0 + rng.gen_range(-config.max_contrast..=config.max_contrast) as f32;
        let mean = image.iter().sum::<f32>() / image.len() as f32;
        image.iter_mut().for_each(|v| *v = mean + k * (*v - mean));
    }
    if rng.gen_bool(config.p_sharpen) {
        let blurred = box_blur(image, height, width);
        image.iter_mut().zip(blurred).for_each(|(v, b)| *v += *v - b);
    }
    if rng.gen_bool(config.p_blur) {
        let blurred = box_blur(image, height, width);
        image.copy_from_slice(&blurred);
    }
    if rng.gen_bool(config.p_noise) && config.noise_sd > 0.0 {
        let normal = Normal::new(0.0, config.noise_sd as f32).expect("noise sd validated");
        image.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn classical_augment(imp: &ImageMaskPair, config: &AugmentConfig, seed: u64) -> Result<ImageMaskPair> {
    imp.validate()?;
    config.validate()?;
    let (h, w) = (imp.height, imp.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = sample_geometric(config, h, w, &mut rng);
    let mut image = t.apply(&imp.image, h, w, Resample::Bilinear);
    let mask = t.apply_mask(&imp.mask, h, w);
    intensity_augment(&mut image, h, w, config, &mut rng);
    Ok(ImageMaskPair {
        image,
        mask,
        ..imp.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn imp(h: usize, w: usize, seed: u64) -> ImageMaskPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = (0..h * w).map(|_| Rng::gen::<f32>(&mut rng)).collect();
        let mask = (0..h * w).map(|i| ((i / w) * 7 / h) as u8).collect();
        ImageMaskPair::new(h, w, image, mask, 0).unwrap()
    }

    #[test]
    fn identity_leaves_pair_unchanged() {
        let p = imp(16, 12, 1);
        assert_eq!(classical_augment(&p, &AugmentConfig::identity(), 5).unwrap(), p);
    }

    #[test]
    fn flip_moves_image_and_mask_together() {
        let p = imp(8, 10, 2);
        let config = AugmentConfig {
            p_flip: 1.0,
            ..AugmentConfig::identity()
        };
        let out = classical_augment(&p, &config, 3).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                assert_eq!(out.image[y * 10 + x], p.image[y * 10 + 9 - x]);
                assert_eq!(out.mask[y * 10 + x], p.mask[y * 10 + 9 - x]);
            }
        }
    }

    #[test]
    fn intensity_ops_leave_mask_alone() {
        let p = imp(16, 16, 3);
        let config = AugmentConfig {
            p_noise: 1.0,
            noise_sd: 0.1,
            p_contrast: 1.0,
            max_contrast: 0.5,
            p_sharpen: 1.0,
            p_blur: 1.0,
            ..AugmentConfig::identity()
        };
        let out = classical_augment(&p, &config, 4).unwrap();
        assert_eq!(out.mask, p.mask);
        assert_ne!(out.image, p.image);
        assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_affine_is_redrawn() {
        let config = AugmentConfig {
            p_affine: 1.0,
            ..AugmentConfig::default()
        };
        for s in 0..50 {
            let t = sample_geometric(&config, 32, 32, &mut ChaCha8Rng::seed_from_u64(s));
            assert!(t.det().abs() > 1e-3);
        }
        assert!(AugmentConfig {
            max_scale: 1.0,
            ..AugmentConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn same_seed_same_draw() {
        let p = imp(16, 16, 4);
        let c = AugmentConfig::default();
        assert_eq!(
            classical_augment(&p, &c, 9).unwrap(),
            classical_augment(&p, &c, 9).unwrap()
        );
    }

    proptest! {
        #[test]
        fn mask_follows_geometric_transform(seed in any::<u64>(), data in any::<u64>()) {
            let p = imp(20, 16, data);
            let config = AugmentConfig { p_flip: 0.5, p_affine: 1.0, ..AugmentConfig::default() };
            let out = classical_augment(&p, &config, seed).unwrap();
            let t = sample_geometric(&config, 20, 16, &mut ChaCha8Rng::seed_from_u64(seed));
            for label in 0..7u8 {
                let indicator: Vec<f32> = p.mask.iter().map(|&m| (m == label) as u8 as f32).collect();
                let moved = t.apply(&indicator, 20, 16, Resample::Nearest);
                for (m, i) in out.mask.iter().zip(&moved) {
                    prop_assert_eq!(*m == label, *i == 1.0);
                }
            }
        }
    }
}
