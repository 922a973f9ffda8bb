//! Seeded training-time augmentation: random flips followed by one
//! photometric or geometric operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{quantize, ImageBuffer};
use crate::tiler::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Rotation,
    Equalization,
    Solarization,
    Inversion,
    Contrast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub op_set: Vec<AugmentOp>,
    /// Right angles, in degrees.
    pub rotation_angles: Vec<u32>,
    pub solarize_threshold: u16,
    pub contrast_factor_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_hflip: 0.5,
            p_vflip: 0.5,
            op_set: vec![
                AugmentOp::Rotation,
                AugmentOp::Equalization,
                AugmentOp::Solarization,
                AugmentOp::Inversion,
                AugmentOp::Contrast,
            ],
            rotation_angles: vec![90, 180, 270],
            solarize_threshold: 128,
            contrast_factor_range: (0.5, 1.5),
        }
    }
}

impl AugmentPolicy {
    pub fn validated(self) -> Result<Self, String> {
        for p in [self.p_hflip, self.p_vflip] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("flip probability {p} outside [0, 1]"));
            }
        }
        if self.op_set.is_empty() {
            return Err("op_set must not be empty".into());
        }
        if self.op_set.contains(&AugmentOp::Rotation)
            && (self.rotation_angles.is_empty() || self.rotation_angles.iter().any(|a| ![90, 180, 270].contains(a)))
        {
            return Err(format!("rotation angles {:?} must be non-empty right angles", self.rotation_angles));
        }
        let (lo, hi) = self.contrast_factor_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("contrast range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        Ok(self)
    }
}

/// Per-patch seed derived from a global seed and the patch index (SplitMix64).
pub fn derive_seed(global_seed: u64, index: u64) -> u64 {
    let mut z = global_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Flips, then exactly one op drawn uniformly from the policy's op set.
pub fn apply_augmentation(patch: &Patch, policy: &AugmentPolicy, rng_seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut img = patch.pixels.clone();
    if rng.random_bool(policy.p_hflip) {
        img = img.flip_horizontal();
    }
    if rng.random_bool(policy.p_vflip) {
        img = img.flip_vertical();
    }
    let op = policy.op_set[rng.random_range(0..policy.op_set.len())];
    img = match op {
        AugmentOp::Rotation => {
            let angle = policy.rotation_angles[rng.random_range(0..policy.rotation_angles.len())];
            rotate90(&img, angle / 90)
        }
        AugmentOp::Equalization => equalize(&img),
        AugmentOp::Solarization => solarize(&img, policy.solarize_threshold),
        AugmentOp::Inversion => invert(&img),
        AugmentOp::Contrast => {
            let (lo, hi) = policy.contrast_factor_range;
            let factor = if lo == hi { lo } else { rng.random_range(lo..hi) };
            adjust_contrast(&img, factor)
        }
    };
    patch.with_pixels(img)
}

/// Per-channel histogram equalization via the cumulative histogram.
///
/// `v -> round((cdf(v) - cdf_min) / (n - cdf_min) * 255)`; a channel with a
/// single value is left unchanged.
pub fn equalize(img: &ImageBuffer) -> ImageBuffer {
    let c = img.channels() as usize;
    let n = img.width() * img.height();
    let mut luts = Vec::with_capacity(c);
    for ch in 0..c {
        let mut hist = [0usize; 256];
        img.data().iter().skip(ch).step_by(c).for_each(|&v| hist[v as usize] += 1);
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (slot, h) in cdf.iter_mut().zip(hist) {
            acc += h;
            *slot = acc;
        }
        let cdf_min = hist.iter().zip(cdf).find(|(h, _)| **h > 0).map(|(_, c)| c).unwrap_or(0);
        let lut: Vec<u8> = if n == cdf_min {
            (0..=255u8).collect()
        } else {
            cdf.iter().map(|&cv| quantize((cv.saturating_sub(cdf_min)) as f64 / (n - cdf_min) as f64 * 255.0)).collect()
        };
        luts.push(lut);
    }
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = luts[i % c][*v as usize];
    }
    out
}

/// Samples at or above `threshold` become `255 - v`.
pub fn solarize(img: &ImageBuffer, threshold: u16) -> ImageBuffer {
    img.map_samples(|v| if v as u16 >= threshold { 255 - v } else { v })
}

pub fn invert(img: &ImageBuffer) -> ImageBuffer {
    img.map_samples(|v| 255 - v)
}

/// `v -> mean + factor * (v - mean)` with the mean over all samples.
pub fn adjust_contrast(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    let data = img.data();
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
    img.map_samples(|v| quantize(mean + factor * (v as f64 - mean)))
}

/// Rotates counter-clockwise by `k` quarter turns.
pub fn rotate90(img: &ImageBuffer, k: u32) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    match k % 4 {
        0 => img.clone(),
        1 => ImageBuffer::from_fn_dyn(h, w, img.channels(), |x, y| img.pixel(w - 1 - y, x)),
        2 => ImageBuffer::from_fn_dyn(w, h, img.channels(), |x, y| img.pixel(w - 1 - x, h - 1 - y)),
        _ => ImageBuffer::from_fn_dyn(h, w, img.channels(), |x, y| img.pixel(y, h - 1 - x)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch(img: ImageBuffer) -> Patch {
        Patch { pixels: img, slide_id: "s".into(), roi_id: None, origin_px: (0, 0), origin_nm: (0.0, 0.0), label: None }
    }

    fn textured(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| [(x * 37 + y * 11) as u8, (x * y) as u8, (200 - x - y) as u8])
    }

    #[test]
    fn same_seed_same_output() {
        let p = patch(textured(16, 16));
        let policy = AugmentPolicy::default();
        for seed in 0..20 {
            assert_eq!(apply_augmentation(&p, &policy, seed), apply_augmentation(&p, &policy, seed));
        }
    }

    #[test]
    fn inversion_policy_is_an_involution() {
        let p = patch(textured(12, 12));
        let policy =
            AugmentPolicy { p_hflip: 0.0, p_vflip: 0.0, op_set: vec![AugmentOp::Inversion], ..Default::default() };
        let twice = apply_augmentation(&apply_augmentation(&p, &policy, 3), &policy, 4);
        assert_eq!(twice, p);
    }

    #[test]
    fn half_turn_policy_is_an_involution() {
        let p = patch(textured(12, 12));
        let policy = AugmentPolicy {
            p_hflip: 0.0,
            p_vflip: 0.0,
            op_set: vec![AugmentOp::Rotation],
            rotation_angles: vec![180],
            ..Default::default()
        };
        let once = apply_augmentation(&p, &policy, 1);
        assert_ne!(once, p);
        assert_eq!(apply_augmentation(&once, &policy, 2), p);
    }

    #[test]
    fn equalize_degenerate_and_binary() {
        let flat = ImageBuffer::filled(5, 5, &[77]).unwrap();
        assert_eq!(equalize(&flat), flat);
        let binary = ImageBuffer::from_fn(4, 4, |x, _| [if x < 2 { 0 } else { 255 }]);
        assert_eq!(equalize(&binary), binary);
    }

    #[test]
    fn equalize_four_level_ramp() {
        // Levels 10, 20, 30, 40 with counts 1, 2, 3, 2 (n = 8).
        // cdf = 1, 3, 6, 8; cdf_min = 1 -> (cdf-1)/7*255 = 0, 72.857, 182.14, 255.
        let img = ImageBuffer::new(8, 1, 1, vec![10, 20, 20, 30, 30, 30, 40, 40]).unwrap();
        assert_eq!(equalize(&img).data(), &[0, 73, 73, 182, 182, 182, 255, 255]);
    }

    #[test]
    fn point_ops() {
        let img = textured(9, 7);
        assert_eq!(solarize(&img, 256), img);
        assert_eq!(adjust_contrast(&img, 1.0), img);
        assert_eq!(invert(&invert(&img)), img);
        let s = solarize(&ImageBuffer::new(3, 1, 1, vec![10, 128, 200]).unwrap(), 128);
        assert_eq!(s.data(), &[10, 127, 55]);
        let c = adjust_contrast(&ImageBuffer::new(2, 1, 1, vec![100, 200]).unwrap(), 2.0);
        assert_eq!(c.data(), &[50, 250]);
    }

    #[test]
    fn rotation_direction() {
        let img = ImageBuffer::new(2, 1, 1, vec![1, 2]).unwrap();
        let r = rotate90(&img, 1);
        assert_eq!((r.width(), r.height()), (1, 2));
        assert_eq!(r.data(), &[2, 1]);
        assert_eq!(rotate90(&img, 3).data(), &[1, 2]);
    }

    #[test]
    fn seeds_are_spread() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validated().is_ok());
        assert!(AugmentPolicy { op_set: vec![], ..Default::default() }.validated().is_err());
        assert!(AugmentPolicy { p_hflip: 1.5, ..Default::default() }.validated().is_err());
        assert!(AugmentPolicy { rotation_angles: vec![45], ..Default::default() }.validated().is_err());
    }

    proptest! {
        #[test]
        fn ops_preserve_shape(seed in any::<u64>(), n in 1usize..20) {
            let p = patch(textured(n, n));
            let out = apply_augmentation(&p, &AugmentPolicy::default(), seed);
            prop_assert_eq!(out.pixels.width(), n);
            prop_assert_eq!(out.pixels.height(), n);
            prop_assert_eq!(out.pixels.channels(), 3);
        }

        #[test]
        fn quarter_turns_cycle(w in 1usize..12, h in 1usize..12, k in 1u32..4) {
            let img = textured(w, h);
            let mut r = img.clone();
            for _ in 0..(4 / k) * if 4 % k == 0 { 1 } else { 4 } {
                r = rotate90(&r, k);
            }
            prop_assert_eq!(r, img);
        }
    }
}
