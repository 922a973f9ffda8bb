//! On-disk slide corpora and the procedural synthetic corpus.
//!
//! A corpus is two directories: `slides/` with `<id>.png` and `<id>.json`
//! metadata per slide, and `annotations/` with `<id>.ndpa.xml`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotations::{
    parse_annotations, serialize_annotations, AnnotationError, Contour, RoIAnnotation, SlideAnnotationSet,
    SlideMetadata, TissueClass6, DEFAULT_MPP,
};
use crate::augment::derive_seed;
use crate::raster::{quantize, ImageBuffer, RasterError};
use crate::stainnorm::StainProfile;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("slide {slide}: {source}")]
    Annotation { slide: String, source: AnnotationError },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("slide {slide}: image is {image:?} px, metadata says {metadata:?}")]
    SizeMismatch { slide: String, image: (usize, usize), metadata: (u32, u32) },
    #[error("no slides found in {0}")]
    Empty(String),
    #[error("invalid synthetic corpus options: {0}")]
    InvalidOptions(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSlide {
    pub annotations: SlideAnnotationSet,
    pub image_path: PathBuf,
}

impl CorpusSlide {
    pub fn slide_id(&self) -> &str {
        self.annotations.slide_id()
    }

    pub fn metadata(&self) -> &SlideMetadata {
        &self.annotations.metadata
    }

    /// Reads the slide raster and checks it against the metadata.
    pub fn load_image(&self) -> Result<ImageBuffer, CorpusError> {
        let img = ImageBuffer::read_png(&self.image_path)?;
        let m = self.metadata();
        if (img.width(), img.height()) != (m.width_px as usize, m.height_px as usize) {
            return Err(CorpusError::SizeMismatch {
                slide: m.slide_id.clone(),
                image: (img.width(), img.height()),
                metadata: (m.width_px, m.height_px),
            });
        }
        Ok(img)
    }
}

/// Slides ordered by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub slides: Vec<CorpusSlide>,
}

impl Corpus {
    pub fn load(slides_dir: impl AsRef<Path>, annotations_dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let (slides_dir, annotations_dir) = (slides_dir.as_ref(), annotations_dir.as_ref());
        let mut meta_paths: Vec<PathBuf> = fs::read_dir(slides_dir)
            .map_err(|e| io_err(slides_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        meta_paths.sort();
        if meta_paths.is_empty() {
            return Err(CorpusError::Empty(slides_dir.display().to_string()));
        }
        let mut slides = Vec::with_capacity(meta_paths.len());
        for meta_path in meta_paths {
            let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
            let stem = meta_path.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let metadata = SlideMetadata::from_json(&text)
                .map_err(|source| CorpusError::Annotation { slide: stem.clone(), source })?;
            let id = metadata.slide_id.clone();
            let xml_path = annotations_dir.join(format!("{id}.ndpa.xml"));
            let xml = fs::read_to_string(&xml_path).map_err(|e| io_err(&xml_path, e))?;
            let annotations = parse_annotations(&xml, metadata)
                .map_err(|source| CorpusError::Annotation { slide: id.clone(), source })?;
            let image_path = slides_dir.join(format!("{id}.png"));
            if !image_path.is_file() {
                return Err(io_err(&image_path, "slide image not found"));
            }
            slides.push(CorpusSlide { annotations, image_path });
        }
        slides.sort_by(|a, b| a.slide_id().cmp(b.slide_id()));
        if let Some(w) = slides.windows(2).find(|w| w[0].slide_id() == w[1].slide_id()) {
            return Err(CorpusError::Io {
                path: slides_dir.display().to_string(),
                message: format!("duplicate slide id {:?}", w[0].slide_id()),
            });
        }
        Ok(Corpus { slides })
    }

    pub fn annotation_sets(&self) -> Vec<SlideAnnotationSet> {
        self.slides.iter().map(|s| s.annotations.clone()).collect()
    }

    pub fn slide(&self, slide_id: &str) -> Option<&CorpusSlide> {
        self.slides.iter().find(|s| s.slide_id() == slide_id)
    }
}

/// Layout of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub per_class: usize,
    pub classes: Vec<TissueClass6>,
    pub seed: u64,
    pub mpp: f64,
    /// Physical slide extent in µm.
    pub width_um: f64,
    pub height_um: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            per_class: 10,
            classes: TissueClass6::ALL.to_vec(),
            seed: 0,
            mpp: 4.0 * DEFAULT_MPP,
            width_um: 2600.0,
            height_um: 1500.0,
        }
    }
}

/// Texture signature of one class, lengths in µm.
#[derive(Debug, Clone, Copy)]
struct ClassTexture {
    /// Nuclei per 1000 µm².
    nuclei_density: f64,
    nucleus_radius: f64,
    stripe_period: f64,
    stripe_amplitude: f64,
    eosin_base: f64,
}

fn texture(class: TissueClass6) -> ClassTexture {
    let t = |nuclei_density, nucleus_radius, stripe_period, stripe_amplitude, eosin_base| ClassTexture {
        nuclei_density,
        nucleus_radius,
        stripe_period,
        stripe_amplitude,
        eosin_base,
    };
    match class {
        TissueClass6::Hp => t(0.6, 4.0, 30.0, 0.55, 0.35),
        TissueClass6::Norm => t(0.3, 3.5, 80.0, 0.15, 0.22),
        TissueClass6::TaHg => t(2.0, 6.0, 50.0, 0.30, 0.45),
        TissueClass6::TaLg => t(1.1, 4.5, 50.0, 0.30, 0.40),
        TissueClass6::TvaHg => t(2.0, 6.0, 150.0, 0.60, 0.45),
        TissueClass6::TvaLg => t(1.1, 4.5, 150.0, 0.60, 0.40),
    }
}

/// Slide id of the `k`-th synthetic slide of `class`, e.g. `ta-lg-003`.
pub fn synthetic_slide_id(class: TissueClass6, k: usize) -> String {
    format!("{}-{k:03}", class.title().to_lowercase().replace('.', "-"))
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, rel: f64) -> f64 {
    v * (1.0 + rng.random_range(-rel..=rel))
}

fn stain_vector(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    let v = base.map(|c| (c + rng.random_range(-0.04..=0.04)).max(0.01));
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

/// Irregular polygon hugging the rectangle `[x0, x1] × [y0, y1]` (µm), with
/// vertices pulled inwards by up to `wobble` µm. Returned in nm.
fn roi_polygon(rng: &mut ChaCha8Rng, x0: f64, y0: f64, x1: f64, y1: f64, wobble: f64) -> Vec<(i64, i64)> {
    const PER_SIDE: usize = 4;
    let mut pts = Vec::with_capacity(4 * PER_SIDE);
    let corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)];
    let inward = [(0.0, 1.0), (-1.0, 0.0), (0.0, -1.0), (1.0, 0.0)];
    for side in 0..4 {
        let (ax, ay) = corners[side];
        let (bx, by) = corners[(side + 1) % 4];
        let (nx, ny) = inward[side];
        for k in 0..PER_SIDE {
            let t = k as f64 / PER_SIDE as f64;
            let d = rng.random_range(0.0..=wobble);
            let (x, y) = (ax + (bx - ax) * t + nx * d, ay + (by - ay) * t + ny * d);
            pts.push(((x * 1000.0).round() as i64, (y * 1000.0).round() as i64));
        }
    }
    pts
}

/// Renders one synthetic H&E slide of `class` and its annotations.
pub fn synthesize_slide(
    slide_id: &str,
    class: TissueClass6,
    opts: &SynthOptions,
    seed: u64,
) -> Result<(ImageBuffer, SlideAnnotationSet), CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mpp = opts.mpp;
    let (w, h) = ((opts.width_um / mpp).round() as usize, (opts.height_um / mpp).round() as usize);
    let tex = texture(class);
    let reference = StainProfile::default();
    let hem = stain_vector(&mut rng, reference.hematoxylin());
    let eos = stain_vector(&mut rng, reference.eosin());
    let density = jitter(&mut rng, tex.nuclei_density, 0.1);
    let radius_um = jitter(&mut rng, tex.nucleus_radius, 0.1);
    let period_um = jitter(&mut rng, tex.stripe_period, 0.1);
    let amplitude = jitter(&mut rng, tex.stripe_amplitude, 0.1);
    let eosin_base = jitter(&mut rng, tex.eosin_base, 0.1);
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let margin_um = 60.0;

    // Hematoxylin from nuclei, accumulated per native pixel.
    let mut hema = vec![0.08f32; w * h];
    let area = (opts.width_um - 2.0 * margin_um) * (opts.height_um - 2.0 * margin_um);
    let count = (density * area / 1000.0).round() as usize;
    let r_px = radius_um / mpp;
    for _ in 0..count {
        let cx = rng.random_range(margin_um..opts.width_um - margin_um) / mpp;
        let cy = rng.random_range(margin_um..opts.height_um - margin_um) / mpp;
        let r = r_px * rng.random_range(0.8..1.2);
        let strength = rng.random_range(0.8..1.2) as f32;
        let (xa, xb) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w - 1));
        let (ya, yb) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h - 1));
        for y in ya..=yb {
            for x in xa..=xb {
                let d = ((x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) / r).min(1.0);
                let v = (1.0 - d.powi(4)) as f32 * strength;
                let slot = &mut hema[y * w + x];
                *slot = (*slot + v).min(1.6);
            }
        }
    }

    let (ct, st) = (theta.cos(), theta.sin());
    let k = 2.0 * PI / period_um;
    let mut data = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let (ux, uy) = ((x as f64 + 0.5) * mpp, (y as f64 + 0.5) * mpp);
            let px = &mut data[(y * w + x) * 3..(y * w + x) * 3 + 3];
            let inside =
                ux > margin_um && uy > margin_um && ux < opts.width_um - margin_um && uy < opts.height_um - margin_um;
            if !inside {
                let v = 244 + rng.random_range(0..6u8);
                px.copy_from_slice(&[v, v, v]);
                continue;
            }
            let stripe = 0.5 + 0.5 * (k * (ux * ct + uy * st) + phase).sin();
            let noise: f64 = rng.random_range(-0.04..0.04) + rng.random_range(-0.04..0.04);
            let ce = (eosin_base + amplitude * stripe + noise).max(0.0);
            let ch = hema[y * w + x] as f64 + rng.random_range(-0.03..0.03);
            for c in 0..3 {
                let od = (hem[c] * ch + eos[c] * ce).max(0.0);
                px[c] = quantize(255.0 * 10f64.powf(-od) - 1.0);
            }
        }
    }
    let image = ImageBuffer::new(w, h, 3, data)?;

    let metadata = SlideMetadata::new(slide_id, mpp, w as u32, h as u32, (0.0, 0.0))
        .map_err(|source| CorpusError::Annotation { slide: slide_id.to_string(), source })?;
    let half = opts.width_um / 2.0;
    let (top, bottom) = (margin_um + 40.0, opts.height_um - margin_um - 40.0);
    let boxes = [(margin_um + 40.0, half - 50.0), (half + 50.0, opts.width_um - margin_um - 40.0)];
    let rois = boxes
        .iter()
        .enumerate()
        .map(|(i, &(x0, x1))| {
            let contour = Contour::new(roi_polygon(&mut rng, x0, top, x1, bottom, 30.0))?;
            Ok(RoIAnnotation { roi_id: (i + 1).to_string(), label: class, contour })
        })
        .collect::<Result<Vec<_>, AnnotationError>>()
        .and_then(|rois| SlideAnnotationSet::new(metadata, rois))
        .map_err(|source| CorpusError::Annotation { slide: slide_id.to_string(), source })?;
    Ok((image, rois))
}

/// Writes a synthetic corpus under `out_dir` (`slides/` and `annotations/`).
///
/// Output bytes depend only on the options.
pub fn generate_synthetic_corpus(out_dir: impl AsRef<Path>, opts: &SynthOptions) -> Result<Corpus, CorpusError> {
    if opts.per_class == 0 || opts.classes.is_empty() {
        return Err(CorpusError::InvalidOptions("need at least one class and one slide per class".into()));
    }
    if !(opts.mpp > 0.0 && opts.width_um > 200.0 && opts.height_um > 200.0) {
        return Err(CorpusError::InvalidOptions(format!(
            "mpp {} and extent {}x{} µm",
            opts.mpp, opts.width_um, opts.height_um
        )));
    }
    let out = out_dir.as_ref();
    let (slides_dir, ann_dir) = (out.join("slides"), out.join("annotations"));
    for d in [&slides_dir, &ann_dir] {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let mut slides = Vec::new();
    for (ci, &class) in opts.classes.iter().enumerate() {
        for k in 0..opts.per_class {
            let id = synthetic_slide_id(class, k);
            let seed = derive_seed(opts.seed, (ci * opts.per_class + k) as u64);
            let (image, set) = synthesize_slide(&id, class, opts, seed)?;
            let image_path = slides_dir.join(format!("{id}.png"));
            image.write_png(&image_path)?;
            let meta_path = slides_dir.join(format!("{id}.json"));
            fs::write(&meta_path, set.metadata.to_json()).map_err(|e| io_err(&meta_path, e))?;
            let xml_path = ann_dir.join(format!("{id}.ndpa.xml"));
            fs::write(&xml_path, serialize_annotations(&set)).map_err(|e| io_err(&xml_path, e))?;
            slides.push(CorpusSlide { annotations: set, image_path });
        }
    }
    slides.sort_by(|a, b| a.slide_id().cmp(b.slide_id()));
    Ok(Corpus { slides })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::summarize_dataset;

    fn small() -> SynthOptions {
        SynthOptions { per_class: 1, width_um: 600.0, height_um: 500.0, ..Default::default() }
    }

    #[test]
    fn ids_are_path_safe() {
        assert_eq!(synthetic_slide_id(TissueClass6::TvaHg, 7), "tva-hg-007");
        assert_eq!(synthetic_slide_id(TissueClass6::Norm, 0), "norm-000");
    }

    #[test]
    fn synthetic_slide_geometry() {
        let opts = small();
        let (img, set) = synthesize_slide("x", TissueClass6::TaLg, &opts, 5).unwrap();
        assert_eq!((img.width(), img.height()), (340, 283));
        assert_eq!(set.rois.len(), 2);
        assert!(set.rois.iter().all(|r| r.label == TissueClass6::TaLg));
        // Background corner is near white, tissue is stained.
        assert!(img.pixel(0, 0).iter().all(|&v| v >= 244));
        let c = img.pixel(170, 140);
        assert!(c[1] < 230, "{c:?}");
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions { classes: vec![TissueClass6::Hp, TissueClass6::TaHg], per_class: 2, ..small() };
        let made = generate_synthetic_corpus(dir.path(), &opts).unwrap();
        let loaded = Corpus::load(dir.path().join("slides"), dir.path().join("annotations")).unwrap();
        assert_eq!(made, loaded);
        let summary = summarize_dataset(&loaded.annotation_sets());
        assert_eq!(summary.per_class[TissueClass6::Hp.code()].slides, 2);
        assert_eq!(summary.per_class[TissueClass6::TaHg.code()].rois, 4);
        assert_eq!(summary.total.slides, 4);
        let img = loaded.slides[0].load_image().unwrap();
        assert_eq!(img.width() as u32, loaded.slides[0].metadata().width_px);
    }

    #[test]
    fn missing_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Corpus::load(dir.path().join("nope"), dir.path()).is_err());
        fs::create_dir_all(dir.path().join("s")).unwrap();
        assert!(matches!(Corpus::load(dir.path().join("s"), dir.path()), Err(CorpusError::Empty(_))));
    }
}
