//! RoI mask rasterization and sliding-window patch extraction.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{row_in_roi, AnnotationError, Contour, SlideMetadata, TissueClass6};
use crate::raster::ImageBuffer;
use crate::resampler::{resize, scaled_len, PatchSpec, ResampleError};
use crate::stainnorm::sample_to_od;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("region is {region:?} but mask is {mask:?}")]
    DimensionMismatch { region: (usize, usize), mask: (usize, usize) },
    #[error("RoI bounding box lies outside the {0}x{1} slide")]
    RoiOutsideSlide(u32, u32),
    #[error("slide image is {image:?}, metadata says {metadata:?}")]
    SlideSizeMismatch { image: (usize, usize), metadata: (u32, u32) },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error("manifest I/O: {0}")]
    Manifest(String),
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool + Sync) -> Self {
        let bits = (0..width * height).into_par_iter().map(|i| f(i % width, i / width)).collect();
        Mask { width, height, bits }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask { width, height, bits: vec![true; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Native-resolution bounding box of a RoI and its rescaled size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiWindow {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub out_width: usize,
    pub out_height: usize,
}

impl RoiWindow {
    /// Native pixel coordinate of the center of rescaled pixel `(i, j)`.
    pub fn native_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x0 as f64 + (i as f64 + 0.5) * self.width as f64 / self.out_width as f64,
            self.y0 as f64 + (j as f64 + 0.5) * self.height as f64 / self.out_height as f64,
        )
    }

    /// Native pixels per rescaled pixel along x and y.
    pub fn native_step(&self) -> (f64, f64) {
        (self.width as f64 / self.out_width as f64, self.height as f64 / self.out_height as f64)
    }
}

/// Pixel bounding box of `contour` (clamped to the slide) rescaled by `s`.
pub fn roi_window(contour: &Contour, metadata: &SlideMetadata, s: f64) -> Result<RoiWindow, TileError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(ResampleError::NonPositiveInput(format!("scale {s}")).into());
    }
    let (min_x, min_y, max_x, max_y) = contour.bounds();
    let (ax, ay) = metadata.nm_to_px((min_x as f64, min_y as f64));
    let (bx, by) = metadata.nm_to_px((max_x as f64, max_y as f64));
    let x0 = ax.floor().max(0.0);
    let y0 = ay.floor().max(0.0);
    let x1 = bx.ceil().min(metadata.width_px as f64);
    let y1 = by.ceil().min(metadata.height_px as f64);
    if x1 <= x0 || y1 <= y0 {
        return Err(TileError::RoiOutsideSlide(metadata.width_px, metadata.height_px));
    }
    let (width, height) = ((x1 - x0) as usize, (y1 - y0) as usize);
    Ok(RoiWindow {
        x0: x0 as usize,
        y0: y0 as usize,
        width,
        height,
        out_width: scaled_len(width, s),
        out_height: scaled_len(height, s),
    })
}

/// Mask over the rescaled RoI bounding box; a bit is set iff the pixel
/// center falls inside the contour.
pub fn rasterize_mask(contour: &Contour, metadata: &SlideMetadata, s: f64) -> Result<Mask, TileError> {
    let window = roi_window(contour, metadata, s)?;
    Ok(mask_for_window(contour, metadata, &window))
}

pub fn mask_for_window(contour: &Contour, metadata: &SlideMetadata, window: &RoiWindow) -> Mask {
    let xs: Vec<f64> = (0..window.out_width).map(|i| metadata.px_to_nm(window.native_center(i, 0)).0).collect();
    let rows: Vec<Vec<bool>> = (0..window.out_height)
        .into_par_iter()
        .map(|j| row_in_roi(metadata.px_to_nm(window.native_center(0, j)).1, &xs, contour))
        .collect();
    Mask { width: window.out_width, height: window.out_height, bits: rows.concat() }
}

/// Crops the native RoI bounding box from the slide and rescales it.
pub fn extract_region(slide: &ImageBuffer, window: &RoiWindow) -> Result<ImageBuffer, TileError> {
    let crop =
        slide.crop(window.x0, window.y0, window.width, window.height).map_err(|_| TileError::SlideSizeMismatch {
            image: (slide.width(), slide.height()),
            metadata: ((window.x0 + window.width) as u32, (window.y0 + window.height) as u32),
        })?;
    Ok(resize(&crop, window.out_width, window.out_height)?)
}

/// A patch extracted from a rescaled region or slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: ImageBuffer,
    pub slide_id: String,
    pub roi_id: Option<String>,
    /// Top-left corner in rescaled region coordinates.
    pub origin_px: (usize, usize),
    /// Top-left corner in slide physical space.
    pub origin_nm: (f64, f64),
    pub label: Option<TissueClass6>,
}

impl Patch {
    /// Identifier unique within a corpus: `slide/roi/x_y`, with `wsi` for
    /// whole-slide patches.
    pub fn patch_id(&self) -> String {
        patch_id(&self.slide_id, self.roi_id.as_deref(), self.origin_px)
    }

    /// Same provenance, different pixels.
    pub fn with_pixels(&self, pixels: ImageBuffer) -> Patch {
        Patch { pixels, ..self.clone() }
    }
}

pub fn patch_id(slide_id: &str, roi_id: Option<&str>, origin_px: (usize, usize)) -> String {
    format!("{slide_id}/{}/{}_{}", roi_id.unwrap_or("wsi"), origin_px.0, origin_px.1)
}

/// Manifest-relative PNG path of a patch: `patches/<slide>/<roi>/<x>_<y>.png`.
pub fn patch_png_path(patch_id: &str) -> String {
    format!("patches/{patch_id}.png")
}

/// Provenance of a rescaled region: where its pixel (0, 0) sits on the slide
/// and how many nanometers one rescaled pixel spans.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFrame {
    pub slide_id: String,
    pub roi_id: Option<String>,
    pub label: Option<TissueClass6>,
    pub origin_nm: (f64, f64),
    pub nm_per_px: (f64, f64),
}

impl RegionFrame {
    pub fn for_roi(metadata: &SlideMetadata, window: &RoiWindow, roi_id: &str, label: TissueClass6) -> Self {
        let (sx, sy) = window.native_step();
        RegionFrame {
            slide_id: metadata.slide_id.clone(),
            roi_id: Some(roi_id.to_string()),
            label: Some(label),
            origin_nm: metadata.px_to_nm((window.x0 as f64, window.y0 as f64)),
            nm_per_px: (sx * metadata.nm_per_px(), sy * metadata.nm_per_px()),
        }
    }

    /// Frame of a whole slide rescaled to `scaled_w`×`scaled_h`.
    pub fn for_slide(metadata: &SlideMetadata, scaled_w: usize, scaled_h: usize) -> Self {
        RegionFrame {
            slide_id: metadata.slide_id.clone(),
            roi_id: None,
            label: None,
            origin_nm: metadata.origin_offset_nm,
            nm_per_px: (
                metadata.width_px as f64 / scaled_w as f64 * metadata.nm_per_px(),
                metadata.height_px as f64 / scaled_h as f64 * metadata.nm_per_px(),
            ),
        }
    }

    fn patch(&self, pixels: ImageBuffer, x: usize, y: usize) -> Patch {
        Patch {
            pixels,
            slide_id: self.slide_id.clone(),
            roi_id: self.roi_id.clone(),
            origin_px: (x, y),
            origin_nm: (self.origin_nm.0 + x as f64 * self.nm_per_px.0, self.origin_nm.1 + y as f64 * self.nm_per_px.1),
            label: self.label,
        }
    }
}

/// Window offsets along one axis: `0, stride, ...` while the window fits.
pub fn lattice(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len < patch {
        return Vec::new();
    }
    (0..=(len - patch) / stride).map(|k| k * stride).collect()
}

/// Summed-area table with a zero border row and column.
struct Integral {
    width: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(width: usize, height: usize, hit: impl Fn(usize, usize) -> bool) -> Self {
        let w1 = width + 1;
        let mut sums = vec![0u32; w1 * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += u32::from(hit(x, y));
                sums[(y + 1) * w1 + x + 1] = sums[y * w1 + x + 1] + row;
            }
        }
        Integral { width, sums }
    }

    fn window(&self, x: usize, y: usize, size: usize) -> u32 {
        let w1 = self.width + 1;
        let at = |xx: usize, yy: usize| self.sums[yy * w1 + xx];
        at(x + size, y + size) + at(x, y) - at(x + size, y) - at(x, y + size)
    }
}

fn sliding_windows(
    image: &ImageBuffer,
    spec: &PatchSpec,
    frame: &RegionFrame,
    integral: &Integral,
    min_count: f64,
) -> Vec<Patch> {
    let p = spec.patch_px;
    let stride = spec.stride_px();
    let xs = lattice(image.width(), p, stride);
    let ys = lattice(image.height(), p, stride);
    let positions: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    positions
        .par_iter()
        .filter(|&&(x, y)| integral.window(x, y, p) as f64 >= min_count)
        .map(|&(x, y)| frame.patch(image.crop(x, y, p, p).expect("window inside region"), x, y))
        .collect()
}

/// Sliding-window patches of a rescaled RoI region, kept when at least
/// `spec.coverage_min` of their pixels lie inside the mask.
///
/// A region smaller than one patch yields no patches.
pub fn extract_roi_patches(
    region: &ImageBuffer,
    mask: &Mask,
    spec: &PatchSpec,
    frame: &RegionFrame,
) -> Result<Vec<Patch>, TileError> {
    if (region.width(), region.height()) != (mask.width, mask.height) {
        return Err(TileError::DimensionMismatch {
            region: (region.width(), region.height()),
            mask: (mask.width, mask.height),
        });
    }
    if region.width() < spec.patch_px || region.height() < spec.patch_px {
        log::warn!(
            "region {}x{} of {}/{} is smaller than a {} px patch",
            region.width(),
            region.height(),
            frame.slide_id,
            frame.roi_id.as_deref().unwrap_or("-"),
            spec.patch_px
        );
        return Ok(Vec::new());
    }
    let integral = Integral::new(mask.width, mask.height, |x, y| mask.get(x, y));
    let min_count = spec.coverage_min * (spec.patch_px * spec.patch_px) as f64;
    Ok(sliding_windows(region, spec, frame, &integral, min_count))
}

/// Background rejection for whole-slide inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TissueFilterParams {
    /// Minimum mean OD across channels for a pixel to count as tissue.
    pub od_threshold: f64,
    pub min_tissue_fraction: f64,
}

impl Default for TissueFilterParams {
    fn default() -> Self {
        TissueFilterParams { od_threshold: 0.10, min_tissue_fraction: 0.20 }
    }
}

impl TissueFilterParams {
    pub fn validated(self) -> Result<Self, String> {
        if !(self.od_threshold >= 0.0 && self.od_threshold.is_finite()) {
            return Err(format!("od_threshold {} must be a non-negative number", self.od_threshold));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(format!("min_tissue_fraction {} outside [0, 1]", self.min_tissue_fraction));
        }
        Ok(self)
    }
}

/// Per-pixel tissue mask: mean OD over channels above `od_threshold`.
pub fn tissue_mask(img: &ImageBuffer, od_threshold: f64) -> Mask {
    let od: Vec<f64> = (0..=255u8).map(|v| sample_to_od(v, 255.0)).collect();
    let c = img.channels() as usize;
    Mask::from_fn(img.width(), img.height(), |x, y| {
        let p = img.pixel(x, y);
        p.iter().map(|&v| od[v as usize]).sum::<f64>() / c as f64 > od_threshold
    })
}

/// Sliding-window patches over an already rescaled slide, kept when their
/// tissue fraction reaches `tf.min_tissue_fraction`.
pub fn extract_slide_patches(
    slide: &ImageBuffer,
    spec: &PatchSpec,
    tf: &TissueFilterParams,
    frame: &RegionFrame,
) -> Vec<Patch> {
    let tissue = tissue_mask(slide, tf.od_threshold);
    let integral = Integral::new(tissue.width, tissue.height, |x, y| tissue.get(x, y));
    let min_count = tf.min_tissue_fraction * (spec.patch_px * spec.patch_px) as f64;
    sliding_windows(slide, spec, frame, &integral, min_count)
}

/// One line of a patch manifest (JSON Lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub roi_id: Option<String>,
    pub label: Option<TissueClass6>,
    pub origin_px: [usize; 2],
    pub origin_nm: [f64; 2],
    pub phi_um: f64,
    /// PNG path, relative to the manifest's directory.
    pub path: String,
    /// `train`, `val`, `test` or `wsi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl ManifestRecord {
    pub fn for_patch(patch: &Patch, phi_um: f64, path: String, split: Option<&str>) -> Self {
        ManifestRecord {
            patch_id: patch.patch_id(),
            slide_id: patch.slide_id.clone(),
            roi_id: patch.roi_id.clone(),
            label: patch.label,
            origin_px: [patch.origin_px.0, patch.origin_px.1],
            origin_nm: [patch.origin_nm.0, patch.origin_nm.1],
            phi_um,
            path,
            split: split.map(str::to_string),
        }
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<(), TileError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| TileError::Manifest(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| TileError::Manifest(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, TileError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| TileError::Manifest(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TileError::Manifest(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TileError::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::polygon_area_cm2;

    fn spec(stride_fraction: f64, coverage_min: f64) -> PatchSpec {
        PatchSpec { phi_um: 600.0, patch_px: 224, stride_fraction, coverage_min }
    }

    fn frame() -> RegionFrame {
        RegionFrame {
            slide_id: "s".into(),
            roi_id: Some("r".into()),
            label: Some(TissueClass6::Hp),
            origin_nm: (1000.0, 2000.0),
            nm_per_px: (10.0, 20.0),
        }
    }

    fn meta() -> SlideMetadata {
        SlideMetadata::new("s", 1.0, 2000, 2000, (0.0, 0.0)).unwrap()
    }

    #[test]
    fn lattice_positions() {
        assert_eq!(lattice(224, 224, 224), vec![0]);
        assert_eq!(lattice(448, 224, 224), vec![0, 224]);
        assert_eq!(lattice(336, 224, 112), vec![0, 112]);
        assert_eq!(lattice(100, 224, 112), Vec::<usize>::new());
    }

    #[test]
    fn single_and_double_patch_regions() {
        let region = ImageBuffer::filled(224, 224, &[1, 2, 3]).unwrap();
        let patches = extract_roi_patches(&region, &Mask::full(224, 224), &spec(1.0, 0.75), &frame()).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].origin_px, (0, 0));
        assert_eq!(patches[0].origin_nm, (1000.0, 2000.0));

        let region = ImageBuffer::filled(448, 224, &[1]).unwrap();
        let patches = extract_roi_patches(&region, &Mask::full(448, 224), &spec(1.0, 0.75), &frame()).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!(patches[1].origin_nm, (1000.0 + 224.0 * 10.0, 2000.0));
        assert_eq!(patches[1].patch_id(), "s/r/224_0");
    }

    #[test]
    fn small_region_yields_nothing() {
        let region = ImageBuffer::filled(100, 300, &[1]).unwrap();
        let patches = extract_roi_patches(&region, &Mask::full(100, 300), &spec(0.5, 0.75), &frame()).unwrap();
        assert!(patches.is_empty());
    }

    #[test]
    fn mismatched_mask_is_an_error() {
        let region = ImageBuffer::filled(300, 300, &[1]).unwrap();
        assert!(matches!(
            extract_roi_patches(&region, &Mask::full(300, 299), &spec(0.5, 0.75), &frame()),
            Err(TileError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn square_contour_gives_solid_mask() {
        let c =
            Contour::new(vec![(100_000, 100_000), (200_000, 100_000), (200_000, 150_000), (100_000, 150_000)]).unwrap();
        let mask = rasterize_mask(&c, &meta(), 0.5).unwrap();
        assert_eq!((mask.width(), mask.height()), (50, 25));
        assert_eq!(mask.count_ones(), 50 * 25);
    }

    #[test]
    fn mask_area_matches_polygon_area() {
        let c = Contour::new(vec![(10_000, 20_000), (610_000, 90_000), (420_000, 700_000), (60_000, 520_000)]).unwrap();
        let md = meta();
        for s in [0.25, 0.5, 1.0] {
            let w = roi_window(&c, &md, s).unwrap();
            let mask = mask_for_window(&c, &md, &w);
            let (sx, sy) = w.native_step();
            let px_area_cm2 = sx * sy * md.nm_per_px().powi(2) / 1e14;
            let approx = mask.count_ones() as f64 * px_area_cm2;
            let exact = polygon_area_cm2(&c);
            assert!((approx - exact).abs() / exact < 0.02, "s={s}: {approx} vs {exact}");
        }
    }

    #[test]
    fn roi_outside_slide() {
        let c = Contour::new(vec![(5_000_000, 5_000_000), (6_000_000, 5_000_000), (6_000_000, 6_000_000)]).unwrap();
        assert!(matches!(rasterize_mask(&c, &meta(), 1.0), Err(TileError::RoiOutsideSlide(..))));
    }

    #[test]
    fn white_slide_has_no_tissue() {
        let slide = ImageBuffer::filled(600, 500, &[255, 255, 255]).unwrap();
        let f = RegionFrame::for_slide(&meta(), 600, 500);
        assert!(extract_slide_patches(&slide, &spec(0.5, 0.0), &TissueFilterParams::default(), &f).is_empty());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let region = ImageBuffer::filled(224, 224, &[1]).unwrap();
        let patches = extract_roi_patches(&region, &Mask::full(224, 224), &spec(1.0, 0.75), &frame()).unwrap();
        let recs: Vec<_> = patches
            .iter()
            .map(|p| ManifestRecord::for_patch(p, 600.0, "patches/a.png".into(), Some("train")))
            .collect();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &recs).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), recs);
        let line = std::fs::read_to_string(&path).unwrap();
        for key in ["slide_id", "roi_id", "label", "origin_px", "origin_nm", "phi_um", "path"] {
            assert!(line.contains(&format!("\"{key}\"")), "{key} missing");
        }
    }
}
