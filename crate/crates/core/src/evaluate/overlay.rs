use super::EvaluateError;
use crate::aggregate::GroupedClass4;
use crate::raster::ImageBuffer;
use crate::resampler::PatchSpec;

/// A patch verdict to draw: top-left origin in the rescaled slide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayBox {
    pub origin_px: (usize, usize),
    pub class: GroupedClass4,
}

/// Legend colors: HP red, NORM white, LG green, HG blue.
pub fn class_color(class: GroupedClass4) -> [u8; 3] {
    match class {
        GroupedClass4::Hp => [255, 0, 0],
        GroupedClass4::Norm => [255, 255, 255],
        GroupedClass4::Lg => [0, 255, 0],
        GroupedClass4::Hg => [0, 0, 255],
    }
}

const SCALE_COLOR: [u8; 3] = [0, 0, 0];
const DASH: usize = 8;
const MARGIN: usize = 8;

fn put(img: &mut ImageBuffer, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.pixel_mut(x as usize, y as usize).copy_from_slice(&color);
    }
}

/// Half side of the verdict box drawn for a patch of `patch_px`.
pub(crate) fn box_radius(patch_px: usize) -> usize {
    (patch_px / 8).max(1)
}

/// Draws a filled box of side `2·(patch_px/8) + 1` centered on each patch,
/// and a dashed black square of side `patch_px` near the bottom-left corner
/// as scale reference.
pub fn render_overlay(
    slide: &ImageBuffer,
    boxes: &[OverlayBox],
    spec: &PatchSpec,
) -> Result<ImageBuffer, EvaluateError> {
    let (w, h) = (slide.width(), slide.height());
    if let Some(b) = boxes.iter().find(|b| b.origin_px.0 >= w || b.origin_px.1 >= h) {
        return Err(EvaluateError::OriginOutOfBounds { origin: b.origin_px, size: (w, h) });
    }
    let mut out = if slide.channels() == 3 { slide.clone() } else { crate::raster::replicate_gray(slide)? };
    let p = spec.patch_px as i64;
    let r = box_radius(spec.patch_px) as i64;
    for b in boxes {
        let (cx, cy) = (b.origin_px.0 as i64 + p / 2, b.origin_px.1 as i64 + p / 2);
        let color = class_color(b.class);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                put(&mut out, x, y, color);
            }
        }
    }
    let x0 = MARGIN as i64;
    let y0 = h as i64 - MARGIN as i64 - p;
    for t in 0..p {
        if (t as usize / DASH) % 2 == 1 {
            continue;
        }
        for k in 0..2 {
            put(&mut out, x0 + t, y0 + k, SCALE_COLOR);
            put(&mut out, x0 + t, y0 + p - 1 - k, SCALE_COLOR);
            put(&mut out, x0 + k, y0 + t, SCALE_COLOR);
            put(&mut out, x0 + p - 1 - k, y0 + t, SCALE_COLOR);
        }
    }
    Ok(out)
}
