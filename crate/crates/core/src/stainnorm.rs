//! Macenko stain normalization.
//!
//! Pixels are moved to optical density (OD) space, where hematoxylin and eosin
//! mix linearly. The two stain directions are the robust angular extremes of
//! the tissue OD cloud inside the plane of its two leading principal axes.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{quantize, ImageBuffer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StainError {
    #[error("only {0} tissue pixels above the OD threshold (need at least 100)")]
    InsufficientTissue(usize),
    #[error("degenerate stain directions: {0}")]
    DegenerateStains(String),
    #[error("expected a 3-channel image, got {0} channels")]
    WrongChannelCount(u8),
    #[error("invalid stain profile: {0}")]
    InvalidProfile(String),
    #[error("invalid Macenko parameters: {0}")]
    InvalidParams(String),
}

pub const MIN_TISSUE_PIXELS: usize = 100;
const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacenkoParams {
    /// Transmitted light intensity.
    pub io: f64,
    /// OD threshold below which a channel counts as transparent.
    pub beta: f64,
    /// Angle percentile for the extreme stain directions.
    pub alpha: f64,
    pub conc_percentile: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        MacenkoParams { io: 255.0, beta: 0.15, alpha: 1.0, conc_percentile: 99.0 }
    }
}

impl MacenkoParams {
    pub fn validated(self) -> Result<Self, StainError> {
        let bad = |m: String| Err(StainError::InvalidParams(m));
        if !(self.io > 0.0) {
            return bad(format!("io {} must be positive", self.io));
        }
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return bad(format!("beta {} outside (0, 2)", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha < 50.0) {
            return bad(format!("alpha {} outside (0, 50)", self.alpha));
        }
        if !(self.conc_percentile > 0.0 && self.conc_percentile <= 100.0) {
            return bad(format!("conc_percentile {} outside (0, 100]", self.conc_percentile));
        }
        Ok(self)
    }
}

/// Stain matrix (unit OD columns: hematoxylin, eosin) and robust maximum
/// concentrations per stain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRecord", into = "ProfileRecord")]
pub struct StainProfile {
    columns: [[f64; 3]; 2],
    max_concentrations: [f64; 2],
}

/// JSON form: six matrix entries column-major plus two maxima.
#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    stain_matrix: [f64; 6],
    max_concentrations: [f64; 2],
}

impl TryFrom<ProfileRecord> for StainProfile {
    type Error = StainError;
    fn try_from(r: ProfileRecord) -> Result<Self, StainError> {
        let m = r.stain_matrix;
        StainProfile::new([[m[0], m[1], m[2]], [m[3], m[4], m[5]]], r.max_concentrations)
    }
}

impl From<StainProfile> for ProfileRecord {
    fn from(p: StainProfile) -> Self {
        let [h, e] = p.columns;
        ProfileRecord { stain_matrix: [h[0], h[1], h[2], e[0], e[1], e[2]], max_concentrations: p.max_concentrations }
    }
}

impl Default for StainProfile {
    /// Reference H&E profile published with the Macenko method.
    fn default() -> Self {
        StainProfile::new([[0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581]], [1.9705, 1.0308])
            .expect("reference profile is valid")
    }
}

impl StainProfile {
    /// Validates and unit-normalizes the stain columns.
    ///
    /// Columns must already be unit-norm within 1e-3.
    pub fn new(columns: [[f64; 3]; 2], max_concentrations: [f64; 2]) -> Result<Self, StainError> {
        let mut cols = columns;
        for col in &mut cols {
            if col.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(StainError::InvalidProfile(format!("column {col:?} has negative or non-finite entries")));
            }
            let n = norm(col);
            if (n - 1.0).abs() > 1e-3 {
                return Err(StainError::InvalidProfile(format!("column {col:?} has norm {n}")));
            }
            if (n - 1.0).abs() > 1e-14 {
                col.iter_mut().for_each(|v| *v /= n);
            }
        }
        let angle = stain_angle_deg(&cols[0], &cols[1]);
        if angle <= MIN_STAIN_ANGLE_DEG {
            return Err(StainError::DegenerateStains(format!("stain columns {angle:.3}° apart")));
        }
        if max_concentrations.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(StainError::InvalidProfile(format!(
                "max concentrations {max_concentrations:?} must be positive"
            )));
        }
        Ok(StainProfile { columns: cols, max_concentrations })
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.columns[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.columns[1]
    }

    pub fn columns(&self) -> [[f64; 3]; 2] {
        self.columns
    }

    pub fn max_concentrations(&self) -> [f64; 2] {
        self.max_concentrations
    }

    pub fn from_json(text: &str) -> Result<Self, StainError> {
        serde_json::from_str(text).map_err(|e| StainError::InvalidProfile(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| StainError::InvalidProfile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Non-negative concentrations of the two stains explaining `od`.
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 2] {
        nnls2(&self.columns, od)
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn stain_angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).abs().min(1.0);
    c.acos().to_degrees()
}

/// Per-sample optical density `-log10((I + 1) / io)`, one triple per pixel.
pub fn rgb_to_od(img: &ImageBuffer, io: f64) -> Result<Vec<[f64; 3]>, StainError> {
    if img.channels() != 3 {
        return Err(StainError::WrongChannelCount(img.channels()));
    }
    let table: Vec<f64> = (0..256).map(|i| sample_to_od(i as u8, io)).collect();
    Ok(img.data().chunks_exact(3).map(|p| [table[p[0] as usize], table[p[1] as usize], table[p[2] as usize]]).collect())
}

pub fn sample_to_od(v: u8, io: f64) -> f64 {
    -((v as f64 + 1.0) / io).log10()
}

fn od_to_sample(od: f64, io: f64) -> u8 {
    quantize(io * (-od * std::f64::consts::LN_10).exp() - 1.0)
}

/// Inverse of [`rgb_to_od`], rounding and clamping to 8 bits.
pub fn od_to_rgb(od: &[[f64; 3]], width: usize, height: usize, io: f64) -> ImageBuffer {
    let mut data = Vec::with_capacity(od.len() * 3);
    for p in od {
        data.extend(p.map(|v| od_to_sample(v, io)));
    }
    ImageBuffer::new(width, height, 3, data).expect("od field matches geometry")
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let scale: f64 = (0..3).map(|i| a[i][i].powi(2)).sum::<f64>() + off;
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in &mut v {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (values, vectors)
}

/// Linear-interpolated percentile of an ascending-sorted slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Same value as [`percentile_sorted`] on the sorted input, found by
/// selection; `values` is reordered.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let (_, &mut at_lo, above) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if rank == lo as f64 {
        return at_lo;
    }
    let at_hi = above.iter().copied().min_by(f64::total_cmp).expect("rank below last index");
    at_lo + (at_hi - at_lo) * (rank - lo as f64)
}

/// Least squares for `od ≈ c0·h + c1·e` subject to `c ≥ 0`.
fn nnls2(cols: &[[f64; 3]; 2], od: [f64; 3]) -> [f64; 2] {
    let [h, e] = cols;
    let (hh, he, ee) = (dot(h, h), dot(h, e), dot(e, e));
    let (bh, be) = (dot(h, &od), dot(e, &od));
    let det = hh * ee - he * he;
    let c0 = (ee * bh - he * be) / det;
    let c1 = (hh * be - he * bh) / det;
    if c0 >= 0.0 && c1 >= 0.0 {
        return [c0, c1];
    }
    // Optimum lies on the boundary: best of the two single-stain fits.
    let only_h = [(bh / hh).max(0.0), 0.0];
    let only_e = [0.0, (be / ee).max(0.0)];
    let objective =
        |c: [f64; 2]| hh * c[0] * c[0] + 2.0 * he * c[0] * c[1] + ee * c[1] * c[1] - 2.0 * (bh * c[0] + be * c[1]);
    if objective(only_h) <= objective(only_e) {
        only_h
    } else {
        only_e
    }
}

/// Estimates the stain profile of an H&E image.
pub fn estimate_stain_profile(img: &ImageBuffer, params: &MacenkoParams) -> Result<StainProfile, StainError> {
    let params = params.validated()?;
    let od = rgb_to_od(img, params.io)?;
    let tissue: Vec<[f64; 3]> = od.into_iter().filter(|p| p.iter().all(|&v| v > params.beta)).collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(StainError::InsufficientTissue(tissue.len()));
    }

    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for p in &tissue {
        (0..3).for_each(|i| mean[i] += p[i]);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = [[0.0; 3]; 3];
    for p in &tissue {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n - 1.0);

    let (values, vectors) = symmetric_eigen3(cov);
    if !(values[0] > 1e-12) || values[1] <= 1e-9 * values[0] {
        return Err(StainError::DegenerateStains(format!("OD covariance has rank < 2 (eigenvalues {values:?})")));
    }
    let (v1, v2) = (vectors[0], vectors[1]);

    // Align the in-plane basis with the mean OD direction so every angle lies
    // in (-90°, 90°) and the percentiles never straddle the ±180° cut.
    let (m1, m2) = (dot(&mean, &v1), dot(&mean, &v2));
    let mn = m1.hypot(m2);
    if mn == 0.0 {
        return Err(StainError::DegenerateStains("mean OD orthogonal to stain plane".into()));
    }
    let u1 = [0, 1, 2].map(|i| (m1 * v1[i] + m2 * v2[i]) / mn);
    let u2 = [0, 1, 2].map(|i| (-m2 * v1[i] + m1 * v2[i]) / mn);

    let mut angles: Vec<f64> = tissue.iter().map(|p| dot(p, &u2).atan2(dot(p, &u1))).collect();
    let lo = percentile(&mut angles, params.alpha);
    let hi = percentile(&mut angles, 100.0 - params.alpha);

    let direction = |phi: f64| -> [f64; 3] {
        let mut v = [0, 1, 2].map(|i| phi.cos() * u1[i] + phi.sin() * u2[i]);
        if v.iter().sum::<f64>() < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v.iter_mut().for_each(|x| *x = x.max(0.0));
        let n = norm(&v);
        v.map(|x| x / n)
    };
    let (a, b) = (direction(lo), direction(hi));
    if !(norm(&a) > 0.0 && norm(&b) > 0.0) || a.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(StainError::DegenerateStains("stain direction vanished after clamping".into()));
    }
    let angle = stain_angle_deg(&a, &b);
    if angle <= MIN_STAIN_ANGLE_DEG {
        return Err(StainError::DegenerateStains(format!("stain directions {angle:.3}° apart")));
    }
    // Hematoxylin absorbs more red light than eosin.
    let columns = if a[0] >= b[0] { [a, b] } else { [b, a] };

    let concs: Vec<[f64; 2]> = tissue.iter().map(|p| nnls2(&columns, *p)).collect();
    let mut max_c = [0.0; 2];
    for (k, slot) in max_c.iter_mut().enumerate() {
        let mut c: Vec<f64> = concs.iter().map(|c| c[k]).collect();
        *slot = percentile(&mut c, params.conc_percentile);
    }
    if max_c.iter().any(|c| !(*c > 0.0)) {
        return Err(StainError::DegenerateStains(format!("stain maxima {max_c:?} not positive")));
    }
    StainProfile::new(columns, max_c)
}

/// Maps `img` from the `source` stain appearance onto `reference`.
pub fn normalize(
    img: &ImageBuffer,
    source: &StainProfile,
    reference: &StainProfile,
    params: &MacenkoParams,
) -> Result<ImageBuffer, StainError> {
    let od = rgb_to_od(img, params.io)?;
    let ratio = [0, 1].map(|k| reference.max_concentrations[k] / source.max_concentrations[k]);
    let [rh, re] = reference.columns;
    let out: Vec<[f64; 3]> = od
        .par_iter()
        .map(|p| {
            let c = source.concentrations(*p);
            let (ch, ce) = (c[0] * ratio[0], c[1] * ratio[1]);
            [0, 1, 2].map(|i| rh[i] * ch + re[i] * ce)
        })
        .collect();
    Ok(od_to_rgb(&out, img.width(), img.height(), params.io))
}

/// Estimates the source profile of `img` and normalizes it onto `reference`.
pub fn normalize_to_reference(
    img: &ImageBuffer,
    reference: &StainProfile,
    params: &MacenkoParams,
) -> Result<ImageBuffer, StainError> {
    let source = estimate_stain_profile(img, params)?;
    normalize(img, &source, reference, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn od_endpoints() {
        assert_eq!(sample_to_od(254, 255.0), 0.0);
        assert!((sample_to_od(0, 255.0) - 2.406_540_180_433_955).abs() < 1e-12);
        assert!(sample_to_od(100, 255.0) > 0.0);
    }

    #[test]
    fn od_round_trip_within_one_level() {
        let img = ImageBuffer::from_fn(256, 3, |x, y| [x as u8, (255 - x) as u8, (x * (y + 1) % 256) as u8]);
        let od = rgb_to_od(&img, 255.0).unwrap();
        let back = od_to_rgb(&od, 256, 3, 255.0);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let (values, vectors) = symmetric_eigen3([[3.0, 1.0, 0.5], [1.0, 2.0, 0.25], [0.5, 0.25, 1.0]]);
        let m = [[3.0, 1.0, 0.5], [1.0, 2.0, 0.25], [0.5, 0.25, 1.0]];
        assert!(values[0] >= values[1] && values[1] >= values[2]);
        for (lam, v) in values.iter().zip(vectors.iter()) {
            assert!((norm(v) - 1.0).abs() < 1e-12);
            for i in 0..3 {
                let mv: f64 = (0..3).map(|j| m[i][j] * v[j]).sum();
                assert!((mv - lam * v[i]).abs() < 1e-10);
            }
        }
        let trace: f64 = values.iter().sum();
        assert!((trace - 6.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_clamps_to_boundary() {
        let cols = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(nnls2(&cols, [0.5, 0.25, 9.0]), [0.5, 0.25]);
        assert_eq!(nnls2(&cols, [-0.5, 0.25, 0.0]), [0.0, 0.25]);
        assert_eq!(nnls2(&cols, [-0.5, -0.25, 0.0]), [0.0, 0.0]);
    }

    #[test]
    fn gray_image_is_degenerate() {
        let img = ImageBuffer::from_fn(32, 32, |x, y| {
            let v = (40 + (x * 3 + y * 2) % 120) as u8;
            [v, v, v]
        });
        assert!(matches!(
            estimate_stain_profile(&img, &MacenkoParams::default()),
            Err(StainError::DegenerateStains(_))
        ));
        let flat = ImageBuffer::filled(20, 20, &[90, 90, 90]).unwrap();
        assert!(matches!(
            estimate_stain_profile(&flat, &MacenkoParams::default()),
            Err(StainError::DegenerateStains(_))
        ));
    }

    #[test]
    fn too_little_tissue() {
        let img = ImageBuffer::from_fn(20, 20, |x, y| if y * 20 + x < 50 { [120, 60, 140] } else { [255, 255, 255] });
        assert_eq!(
            estimate_stain_profile(&img, &MacenkoParams::default()).unwrap_err(),
            StainError::InsufficientTissue(50)
        );
    }

    #[test]
    fn profile_validation_and_json() {
        let p = StainProfile::default();
        assert_eq!(StainProfile::from_json(&p.to_json()).unwrap(), p);
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["stain_matrix"].as_array().unwrap().len(), 6);
        assert_eq!(v["max_concentrations"].as_array().unwrap().len(), 2);
        assert!(StainProfile::new([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [1.0, 1.0]).is_err());
        assert!(StainProfile::new([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], [1.0, 1.0]).is_err());
        assert!(StainProfile::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.0, 1.0]).is_err());
        assert!(StainProfile::new([[-0.1, 0.995, 0.0], [0.0, 1.0, 0.0]], [1.0, 1.0]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(MacenkoParams::default().validated().is_ok());
        assert!(MacenkoParams { beta: 0.0, ..Default::default() }.validated().is_err());
        assert!(MacenkoParams { alpha: 50.0, ..Default::default() }.validated().is_err());
        assert!(MacenkoParams { io: -1.0, ..Default::default() }.validated().is_err());
    }

    proptest::proptest! {
        #[test]
        fn selection_percentile_matches_sorted(mut v in proptest::collection::vec(-1e3f64..1e3, 1..200), p in 0.0f64..=100.0) {
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            proptest::prop_assert_eq!(percentile(&mut v, p), percentile_sorted(&sorted, p));
        }
    }
}
