//! Physical-scale resizing with a separable Lanczos-3 filter.
//!
//! Output pixel `i` samples the source at `(i + 0.5) / s - 0.5`, where `s` is
//! the output/input size ratio of the axis. On downscale the kernel is widened
//! by `1 / s`. Taps falling outside the source clamp to the edge and each
//! output pixel's weights are renormalized to sum to one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{quantize, ImageBuffer};

const LOBES: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResampleError {
    #[error("non-positive input: {0}")]
    NonPositiveInput(String),
    #[error("output must be at least 1x1, got {0}x{1}")]
    EmptyOutput(usize, usize),
    #[error("invalid patch spec: {0}")]
    InvalidPatchSpec(String),
}

/// Patch geometry at a target physical field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    /// Field of view of one patch side, in µm.
    pub phi_um: f64,
    pub patch_px: usize,
    /// Window stride as a fraction of `patch_px`.
    pub stride_fraction: f64,
    /// Minimum in-RoI pixel fraction for a training patch.
    pub coverage_min: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { phi_um: 600.0, patch_px: 224, stride_fraction: 0.5, coverage_min: 0.75 }
    }
}

impl PatchSpec {
    pub const PHI_MIN_UM: f64 = 300.0;
    pub const PHI_MAX_UM: f64 = 1000.0;

    pub fn with_phi(phi_um: f64) -> Result<Self, ResampleError> {
        PatchSpec { phi_um, ..Default::default() }.validated()
    }

    pub fn validated(self) -> Result<Self, ResampleError> {
        let bad = |m: String| Err(ResampleError::InvalidPatchSpec(m));
        if !(Self::PHI_MIN_UM..=Self::PHI_MAX_UM).contains(&self.phi_um) {
            return bad(format!("phi_um {} outside [300, 1000]", self.phi_um));
        }
        if self.patch_px < 32 {
            return bad(format!("patch_px {} below 32", self.patch_px));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return bad(format!("stride_fraction {} outside (0, 1]", self.stride_fraction));
        }
        if !(0.0..=1.0).contains(&self.coverage_min) {
            return bad(format!("coverage_min {} outside [0, 1]", self.coverage_min));
        }
        Ok(self)
    }

    /// Window stride in output pixels.
    pub fn stride_px(&self) -> usize {
        ((self.stride_fraction * self.patch_px as f64).round() as usize).max(1)
    }

    pub fn scale_for(&self, mpp: f64) -> Result<f64, ResampleError> {
        scale_factor(self.phi_um, mpp, self.patch_px)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// `sinc(x) * sinc(x / 3)` on `|x| < 3`, zero elsewhere.
pub fn lanczos3_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x >= LOBES {
        return 0.0;
    }
    if x != 0.0 && x.fract() == 0.0 {
        return 0.0;
    }
    sinc(x) * sinc(x / LOBES)
}

/// Output/input grid ratio so that `patch_px` output pixels span `phi_um`.
pub fn scale_factor(phi_um: f64, mpp: f64, patch_px: usize) -> Result<f64, ResampleError> {
    if !(phi_um > 0.0 && mpp > 0.0 && patch_px > 0) || !phi_um.is_finite() || !mpp.is_finite() {
        return Err(ResampleError::NonPositiveInput(format!("phi_um={phi_um}, mpp={mpp}, patch_px={patch_px}")));
    }
    Ok(mpp * patch_px as f64 / phi_um)
}

/// Output side length for scaling `len` by `s`.
pub fn scaled_len(len: usize, s: f64) -> usize {
    ((len as f64 * s).round() as usize).max(1)
}

/// Weighted sum pairing tap `k` with tap `n - 1 - k`, so mirrored taps and
/// samples produce a bit-identical result.
#[inline]
fn mirror_dot(weights: &[f64], sample: impl Fn(usize) -> f64) -> f64 {
    let n = weights.len();
    let mut acc = 0.0;
    for k in 0..n / 2 {
        acc += weights[k] * sample(k) + weights[n - 1 - k] * sample(n - 1 - k);
    }
    if n % 2 == 1 {
        acc += weights[n / 2] * sample(n / 2);
    }
    acc
}

/// Filter taps of one output sample: edge-clamped source indices and weights.
struct Taps {
    index: Vec<usize>,
    weights: Vec<f64>,
    norm: f64,
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let (n_in, n_out) = (in_len as i64, out_len as i64);
    // Kernel argument for distance numerator `num` (distance = num / (2 * out)).
    let denom = if out_len < in_len { 2.0 * in_len as f64 } else { 2.0 * out_len as f64 };
    let radius = if out_len < in_len { LOBES * in_len as f64 / out_len as f64 } else { LOBES };
    (0..n_out)
        .map(|i| {
            let center = ((2 * i + 1) * n_in - n_out) as f64 / (2 * n_out) as f64;
            let first = (center - radius).floor() as i64;
            let last = (center + radius).ceil() as i64;
            let weights: Vec<f64> = (first..=last)
                .map(|j| {
                    let num = 2 * n_out * j - (2 * i + 1) * n_in + n_out;
                    lanczos3_kernel(num as f64 / denom)
                })
                .collect();
            let norm = mirror_dot(&weights, |_| 1.0);
            let index = (first..=last).map(|j| j.clamp(0, n_in - 1) as usize).collect();
            Taps { index, weights, norm }
        })
        .collect()
}

/// Separable Lanczos-3 resize to `out_w`×`out_h`.
pub fn resize(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer, ResampleError> {
    if out_w == 0 || out_h == 0 {
        return Err(ResampleError::EmptyOutput(out_w, out_h));
    }
    let (w, h, c) = (img.width(), img.height(), img.channels() as usize);
    let src = img.data();
    let xtaps = axis_taps(w, out_w);
    let ytaps = axis_taps(h, out_h);

    // Horizontal pass into an unrounded intermediate of size out_w x h.
    let mut mid = vec![0.0f64; out_w * h * c];
    mid.par_chunks_mut(out_w * c).enumerate().for_each(|(y, row)| {
        let src_row = &src[y * w * c..(y + 1) * w * c];
        for (x, t) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let v = mirror_dot(&t.weights, |k| src_row[t.index[k] * c + ch] as f64);
                row[x * c + ch] = v / t.norm;
            }
        }
    });

    let row_len = out_w * c;
    let mut out = vec![0u8; out_w * out_h * c];
    out.par_chunks_mut(row_len).enumerate().for_each(|(y, row)| {
        let t = &ytaps[y];
        let n = t.weights.len();
        let line = |k: usize| &mid[t.index[k] * row_len..(t.index[k] + 1) * row_len];
        let mut acc = vec![0.0f64; row_len];
        for k in 0..n / 2 {
            let (wa, wb) = (t.weights[k], t.weights[n - 1 - k]);
            let (a, b) = (line(k), line(n - 1 - k));
            for i in 0..row_len {
                acc[i] += wa * a[i] + wb * b[i];
            }
        }
        if n % 2 == 1 {
            let wm = t.weights[n / 2];
            let m = line(n / 2);
            for i in 0..row_len {
                acc[i] += wm * m[i];
            }
        }
        for (o, a) in row.iter_mut().zip(&acc) {
            *o = quantize(a / t.norm);
        }
    });
    Ok(ImageBuffer::new(out_w, out_h, img.channels(), out).expect("resize geometry"))
}

/// Resizes by a uniform factor `s`, rounding the output size.
pub fn resize_by(img: &ImageBuffer, s: f64) -> Result<ImageBuffer, ResampleError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(ResampleError::NonPositiveInput(format!("scale {s}")));
    }
    resize(img, scaled_len(img.width(), s), scaled_len(img.height(), s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_values() {
        assert_eq!(lanczos3_kernel(0.0), 1.0);
        assert_eq!(lanczos3_kernel(1.0), 0.0);
        assert_eq!(lanczos3_kernel(2.0), 0.0);
        assert_eq!(lanczos3_kernel(3.0), 0.0);
        assert_eq!(lanczos3_kernel(-4.5), 0.0);
        let pi = std::f64::consts::PI;
        let direct = ((pi / 2.0).sin() / (pi / 2.0)) * ((pi / 6.0).sin() / (pi / 6.0));
        assert!((lanczos3_kernel(0.5) - direct).abs() < 1e-15);
        assert!((direct - 0.607_927_101_854_026_6).abs() < 1e-12);
    }

    #[test]
    fn scale_factor_definition() {
        assert!((scale_factor(0.4415 * 224.0, 0.4415, 224).unwrap() - 1.0).abs() < 1e-12);
        let s = scale_factor(600.0, 0.4415, 224).unwrap();
        assert!((s - 0.4415 * 224.0 / 600.0).abs() < 1e-15);
        assert!((s - 0.164_826_666_666_666_67).abs() < 1e-12);
        let s2 = scale_factor(1200.0, 0.4415, 224).unwrap();
        assert!((s2 * 2.0 - s).abs() < 1e-15);
        assert!(scale_factor(0.0, 0.4415, 224).is_err());
        assert!(scale_factor(600.0, -1.0, 224).is_err());
        assert!(scale_factor(600.0, 0.4415, 0).is_err());
    }

    #[test]
    fn patch_spec_validation() {
        assert!(PatchSpec::with_phi(600.0).is_ok());
        assert!(PatchSpec::with_phi(299.0).is_err());
        assert!(PatchSpec { patch_px: 16, ..Default::default() }.validated().is_err());
        assert!(PatchSpec { stride_fraction: 0.0, ..Default::default() }.validated().is_err());
        assert!(PatchSpec { coverage_min: 1.5, ..Default::default() }.validated().is_err());
        assert_eq!(PatchSpec::default().stride_px(), 112);
    }

    fn random_image(seed: u64, w: usize, h: usize, c: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.random()).collect();
        ImageBuffer::new(w, h, c as u8, data).unwrap()
    }

    #[test]
    fn identity_size_is_identity() {
        let img = random_image(1, 17, 9, 3);
        assert_eq!(resize(&img, 17, 9).unwrap(), img);
    }

    #[test]
    fn empty_output_rejected() {
        let img = random_image(1, 4, 4, 1);
        assert_eq!(resize(&img, 0, 3).unwrap_err(), ResampleError::EmptyOutput(0, 3));
    }

    #[test]
    fn constant_images_stay_constant() {
        for (v, w, h) in [(0u8, 5, 7), (137, 64, 64), (255, 3, 40)] {
            let img = ImageBuffer::filled(w, h, &[v, v / 2, 255 - v]).unwrap();
            for (ow, oh) in [(1, 1), (2, 3), (10, 10), (150, 31)] {
                let out = resize(&img, ow, oh).unwrap();
                assert!(out.data().chunks(3).all(|p| p == [v, v / 2, 255 - v]));
            }
        }
    }

    #[test]
    fn output_dimensions_follow_scale() {
        let img = random_image(2, 64, 48, 1);
        let out = resize_by(&img, 0.164).unwrap();
        assert_eq!((out.width(), out.height()), (10, 8));
    }

    proptest! {
        #[test]
        fn kernel_is_even(x in -4.0f64..4.0) {
            prop_assert_eq!(lanczos3_kernel(x), lanczos3_kernel(-x));
        }

        #[test]
        fn flips_commute_with_resize(seed in any::<u64>(), w in 1usize..40, h in 1usize..40,
                                     ow in 1usize..60, oh in 1usize..60) {
            let img = random_image(seed, w, h, 3);
            let a = resize(&img.flip_horizontal(), ow, oh).unwrap();
            let b = resize(&img, ow, oh).unwrap().flip_horizontal();
            prop_assert_eq!(a, b);
            let a = resize(&img.flip_vertical(), ow, oh).unwrap();
            let b = resize(&img, ow, oh).unwrap().flip_vertical();
            prop_assert_eq!(a, b);
        }
    }
}
