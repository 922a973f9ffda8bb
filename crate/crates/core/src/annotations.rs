//! Slide metadata, RoI annotation parsing and contour geometry.
//!
//! Annotation files follow a reduced NDPA layout: a root element holding
//! `annotation` elements, each with a `title` (the tissue class) and a
//! `pointlist` of integer nanometer `point`s.
//!
//! ```xml
//! <annotations>
//!   <annotation id="1">
//!     <title>TA.LG</title>
//!     <pointlist>
//!       <point><x>0</x><y>0</y></point>
//!       ...
//!     </pointlist>
//!   </annotation>
//! </annotations>
//! ```

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default scanner resolution at ×20 magnification, in µm per pixel.
pub const DEFAULT_MPP: f64 = 0.4415;

const NM_PER_CM: f64 = 1.0e7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("malformed annotation XML: {0}")]
    MalformedXml(String),
    #[error("unknown class label {0:?}")]
    UnknownClassLabel(String),
    #[error("degenerate contour in RoI {roi_id:?}: {reason}")]
    DegenerateContour { roi_id: String, reason: String },
    #[error("duplicate RoI id {0:?}")]
    DuplicateRoiId(String),
    #[error("invalid slide metadata: {0}")]
    InvalidMetadata(String),
}

/// The six tissue classes of the dataset, with stable codes 0..5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TissueClass6 {
    Hp = 0,
    Norm = 1,
    TaHg = 2,
    TaLg = 3,
    TvaHg = 4,
    TvaLg = 5,
}

impl TissueClass6 {
    pub const COUNT: usize = 6;
    pub const ALL: [TissueClass6; 6] = [
        TissueClass6::Hp,
        TissueClass6::Norm,
        TissueClass6::TaHg,
        TissueClass6::TaLg,
        TissueClass6::TvaHg,
        TissueClass6::TvaLg,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Annotation title string, e.g. `"TA.LG"`.
    pub fn title(self) -> &'static str {
        match self {
            TissueClass6::Hp => "HP",
            TissueClass6::Norm => "NORM",
            TissueClass6::TaHg => "TA.HG",
            TissueClass6::TaLg => "TA.LG",
            TissueClass6::TvaHg => "TVA.HG",
            TissueClass6::TvaLg => "TVA.LG",
        }
    }

    /// Lower-case column name used by the external scores CSV.
    pub fn column_name(self) -> &'static str {
        match self {
            TissueClass6::Hp => "hp",
            TissueClass6::Norm => "norm",
            TissueClass6::TaHg => "ta_hg",
            TissueClass6::TaLg => "ta_lg",
            TissueClass6::TvaHg => "tva_hg",
            TissueClass6::TvaLg => "tva_lg",
        }
    }
}

impl fmt::Display for TissueClass6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

impl FromStr for TissueClass6 {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|c| c.title() == s).ok_or_else(|| AnnotationError::UnknownClassLabel(s.to_string()))
    }
}

impl Serialize for TissueClass6 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.title())
    }
}

impl<'de> Deserialize<'de> for TissueClass6 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-slide scan metadata.
///
/// Annotation coordinates map to pixels via
/// `pixel = (nm - origin_offset_nm) / (mpp * 1000)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetadataRecord", into = "MetadataRecord")]
pub struct SlideMetadata {
    pub slide_id: String,
    pub mpp: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub origin_offset_nm: (f64, f64),
}

#[derive(Serialize, Deserialize)]
struct MetadataRecord {
    slide_id: String,
    #[serde(default = "default_mpp")]
    mpp: f64,
    width_px: u32,
    height_px: u32,
    #[serde(default)]
    offset_x_nm: f64,
    #[serde(default)]
    offset_y_nm: f64,
}

fn default_mpp() -> f64 {
    DEFAULT_MPP
}

impl TryFrom<MetadataRecord> for SlideMetadata {
    type Error = AnnotationError;

    fn try_from(r: MetadataRecord) -> Result<Self, Self::Error> {
        SlideMetadata::new(r.slide_id, r.mpp, r.width_px, r.height_px, (r.offset_x_nm, r.offset_y_nm))
    }
}

impl From<SlideMetadata> for MetadataRecord {
    fn from(m: SlideMetadata) -> Self {
        MetadataRecord {
            slide_id: m.slide_id,
            mpp: m.mpp,
            width_px: m.width_px,
            height_px: m.height_px,
            offset_x_nm: m.origin_offset_nm.0,
            offset_y_nm: m.origin_offset_nm.1,
        }
    }
}

impl SlideMetadata {
    pub fn new(
        slide_id: impl Into<String>,
        mpp: f64,
        width_px: u32,
        height_px: u32,
        origin_offset_nm: (f64, f64),
    ) -> Result<Self, AnnotationError> {
        if !(mpp.is_finite() && mpp > 0.0) {
            return Err(AnnotationError::InvalidMetadata(format!("mpp must be positive, got {mpp}")));
        }
        if width_px == 0 || height_px == 0 {
            return Err(AnnotationError::InvalidMetadata(format!(
                "slide dimensions must be positive, got {width_px}x{height_px}"
            )));
        }
        Ok(SlideMetadata { slide_id: slide_id.into(), mpp, width_px, height_px, origin_offset_nm })
    }

    pub fn from_json(text: &str) -> Result<Self, AnnotationError> {
        serde_json::from_str(text).map_err(|e| AnnotationError::InvalidMetadata(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes")
    }

    /// Nanometers spanned by one native pixel.
    pub fn nm_per_px(&self) -> f64 {
        self.mpp * 1000.0
    }

    pub fn nm_to_px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let s = self.nm_per_px();
        ((x - self.origin_offset_nm.0) / s, (y - self.origin_offset_nm.1) / s)
    }

    pub fn px_to_nm(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let s = self.nm_per_px();
        (x * s + self.origin_offset_nm.0, y * s + self.origin_offset_nm.1)
    }
}

/// A closed free-hand polygon in integer nanometer coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    points: Vec<(i64, i64)>,
}

impl Contour {
    pub fn new(points: Vec<(i64, i64)>) -> Result<Self, AnnotationError> {
        Self::with_id(points, "")
    }

    fn with_id(points: Vec<(i64, i64)>, roi_id: &str) -> Result<Self, AnnotationError> {
        if points.len() < 3 {
            return Err(AnnotationError::DegenerateContour {
                roi_id: roi_id.to_string(),
                reason: format!("{} points, need at least 3", points.len()),
            });
        }
        let contour = Contour { points };
        if contour.twice_signed_area() == 0 {
            return Err(AnnotationError::DegenerateContour {
                roi_id: roi_id.to_string(),
                reason: "zero enclosed area".to_string(),
            });
        }
        Ok(contour)
    }

    pub fn points(&self) -> &[(i64, i64)] {
        &self.points
    }

    /// Shoelace sum over the implicitly closed ring (exact, in nm²·2).
    pub fn twice_signed_area(&self) -> i128 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (x0, y0) = self.points[i];
                let (x1, y1) = self.points[(i + 1) % n];
                x0 as i128 * y1 as i128 - x1 as i128 * y0 as i128
            })
            .sum()
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)` in nm.
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        self.points.iter().fold((i64::MAX, i64::MAX, i64::MIN, i64::MIN), |(ax, ay, bx, by), &(x, y)| {
            (ax.min(x), ay.min(y), bx.max(x), by.max(y))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoIAnnotation {
    pub roi_id: String,
    pub label: TissueClass6,
    pub contour: Contour,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideAnnotationSet {
    pub metadata: SlideMetadata,
    pub rois: Vec<RoIAnnotation>,
}

impl SlideAnnotationSet {
    pub fn new(metadata: SlideMetadata, rois: Vec<RoIAnnotation>) -> Result<Self, AnnotationError> {
        let mut seen = HashSet::new();
        for roi in &rois {
            if !seen.insert(roi.roi_id.as_str()) {
                return Err(AnnotationError::DuplicateRoiId(roi.roi_id.clone()));
            }
        }
        Ok(SlideAnnotationSet { metadata, rois })
    }

    pub fn slide_id(&self) -> &str {
        &self.metadata.slide_id
    }

    pub fn roi(&self, roi_id: &str) -> Option<&RoIAnnotation> {
        self.rois.iter().find(|r| r.roi_id == roi_id)
    }
}

#[derive(Default)]
struct PendingRoi {
    id: Option<String>,
    title: Option<String>,
    points: Vec<(i64, i64)>,
    x: Option<i64>,
    y: Option<i64>,
}

fn malformed(msg: impl Into<String>) -> AnnotationError {
    AnnotationError::MalformedXml(msg.into())
}

/// Parses an annotation document into a typed set for the given slide.
///
/// RoIs without an `id` attribute are numbered by position, starting at 1.
pub fn parse_annotations(xml_text: &str, metadata: SlideMetadata) -> Result<SlideAnnotationSet, AnnotationError> {
    let mut reader = Reader::from_str(xml_text);
    let mut stack: Vec<String> = Vec::new();
    let mut pending: Option<PendingRoi> = None;
    let mut rois = Vec::new();
    let mut saw_root = false;

    loop {
        let event = reader.read_event().map_err(|e| malformed(format!("at byte {}: {e}", reader.buffer_position())))?;
        match event {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if stack.is_empty() {
                    if saw_root {
                        return Err(malformed("multiple root elements"));
                    }
                    saw_root = true;
                }
                match name.as_str() {
                    "annotation" if stack.len() == 1 => {
                        let mut roi = PendingRoi::default();
                        for attr in e.attributes() {
                            let attr = attr.map_err(|e| malformed(e.to_string()))?;
                            if attr.key.as_ref() == b"id" {
                                let value = attr
                                    .decode_and_unescape_value(reader.decoder())
                                    .map_err(|e| malformed(e.to_string()))?;
                                roi.id = Some(value.into_owned());
                            }
                        }
                        pending = Some(roi);
                    }
                    "point" if parent_is(&stack, "pointlist") => {
                        if let Some(roi) = pending.as_mut() {
                            roi.x = None;
                            roi.y = None;
                        }
                    }
                    _ => {}
                }
                stack.push(name);
            }
            Event::End(_) => {
                let name = stack.pop().ok_or_else(|| malformed("unbalanced end tag"))?;
                match name.as_str() {
                    "annotation" if stack.len() == 1 => {
                        let roi = pending.take().expect("annotation start recorded");
                        rois.push(finish_roi(roi, rois.len() + 1)?);
                    }
                    "point" if parent_is(&stack, "pointlist") => {
                        if let Some(roi) = pending.as_mut() {
                            match (roi.x, roi.y) {
                                (Some(x), Some(y)) => roi.points.push((x, y)),
                                _ => return Err(malformed("point without both x and y")),
                            }
                        }
                    }
                    _ => {}
                }
            }
            Event::Empty(e) => {
                if stack.is_empty() {
                    saw_root = true;
                }
                if e.name().as_ref() == b"point" && parent_is(&stack, "pointlist") {
                    return Err(malformed("empty point element"));
                }
            }
            Event::Text(t) => {
                let text = t.decode().map_err(|e| malformed(e.to_string()))?;
                let text = text.trim();
                if text.is_empty() {
                    continue;
                }
                let Some(roi) = pending.as_mut() else { continue };
                let top = stack.last().map(String::as_str);
                match top {
                    Some("title") if stack.len() == 3 => {
                        if roi.title.is_some() {
                            return Err(malformed("annotation has more than one title"));
                        }
                        roi.title = Some(text.to_string());
                    }
                    Some(axis @ ("x" | "y")) if parent_is(&stack[..stack.len() - 1], "point") => {
                        let v: i64 = text.parse().map_err(|_| malformed(format!("non-integer coordinate {text:?}")))?;
                        if axis == "x" {
                            roi.x = Some(v);
                        } else {
                            roi.y = Some(v);
                        }
                    }
                    _ => {}
                }
            }
            Event::GeneralRef(r) => {
                // Entity references inside titles are kept verbatim; class titles never use them.
                if let (Some(roi), Some("title")) = (pending.as_mut(), stack.last().map(String::as_str)) {
                    let name = String::from_utf8_lossy(r.as_ref()).into_owned();
                    roi.title.get_or_insert_with(String::new).push_str(&format!("&{name};"));
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(malformed(format!("unclosed element <{}>", stack.last().unwrap())));
    }
    if !saw_root {
        return Err(malformed("missing root element"));
    }
    SlideAnnotationSet::new(metadata, rois)
}

fn parent_is(stack: &[String], name: &str) -> bool {
    stack.last().is_some_and(|s| s == name)
}

fn finish_roi(roi: PendingRoi, position: usize) -> Result<RoIAnnotation, AnnotationError> {
    let roi_id = roi.id.unwrap_or_else(|| position.to_string());
    let title = roi.title.ok_or_else(|| malformed(format!("annotation {roi_id:?} has no title")))?;
    let label: TissueClass6 = title.parse()?;
    let contour = Contour::with_id(roi.points, &roi_id)?;
    Ok(RoIAnnotation { roi_id, label, contour })
}

/// Writes the canonical text form of an annotation set.
///
/// The canonical form is what [`parse_annotations`] round-trips exactly:
/// two-space indentation, one `point` per line, `\n` line endings.
pub fn serialize_annotations(set: &SlideAnnotationSet) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<annotations>\n");
    for roi in &set.rois {
        out.push_str(&format!(
            "  <annotation id=\"{}\">\n    <title>{}</title>\n    <pointlist>\n",
            quick_xml::escape::escape(roi.roi_id.as_str()),
            roi.label.title()
        ));
        for &(x, y) in roi.contour.points() {
            out.push_str(&format!("      <point><x>{x}</x><y>{y}</y></point>\n"));
        }
        out.push_str("    </pointlist>\n  </annotation>\n");
    }
    out.push_str("</annotations>\n");
    out
}

/// Absolute enclosed area of a contour in cm².
pub fn polygon_area_cm2(contour: &Contour) -> f64 {
    let twice = contour.twice_signed_area().unsigned_abs();
    (twice as f64 / 2.0) / (NM_PER_CM * NM_PER_CM)
}

/// Even-odd containment of a point (nm) in a contour, boundary inclusive.
pub fn point_in_roi(p: (f64, f64), contour: &Contour) -> bool {
    let pts = contour.points();
    let n = pts.len();
    let (px, py) = p;
    let mut inside = false;
    for i in 0..n {
        let (ax, ay) = (pts[i].0 as f64, pts[i].1 as f64);
        let (bx, by) = (pts[(i + 1) % n].0 as f64, pts[(i + 1) % n].1 as f64);
        if on_segment(px, py, ax, ay, bx, by) {
            return true;
        }
        if (ay > py) != (by > py) {
            let x_cross = ax + (py - ay) * (bx - ax) / (by - ay);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// [`point_in_roi`] for the points `(x, y)`, `x` in `xs`, sharing the edge
/// crossings of the row.
pub fn row_in_roi(y: f64, xs: &[f64], contour: &Contour) -> Vec<bool> {
    let pts = contour.points();
    let n = pts.len();
    let mut crossings = Vec::new();
    let mut spanning = Vec::new();
    for i in 0..n {
        let (ax, ay) = (pts[i].0 as f64, pts[i].1 as f64);
        let (bx, by) = (pts[(i + 1) % n].0 as f64, pts[(i + 1) % n].1 as f64);
        if ay.min(by) <= y && y <= ay.max(by) {
            spanning.push((ax, ay, bx, by));
        }
        if (ay > y) != (by > y) {
            crossings.push(ax + (y - ay) * (bx - ax) / (by - ay));
        }
    }
    crossings.sort_by(f64::total_cmp);
    xs.iter()
        .map(|&x| {
            spanning.iter().any(|&(ax, ay, bx, by)| on_segment(x, y, ax, ay, bx, by))
                || (crossings.len() - crossings.partition_point(|&c| c <= x)) % 2 == 1
        })
        .collect()
}

fn on_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    cross == 0.0 && px >= ax.min(bx) && px <= ax.max(bx) && py >= ay.min(by) && py <= ay.max(by)
}

/// Per-class composition row of a [`DatasetSummary`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassComposition {
    pub slides: usize,
    pub rois: usize,
    pub area_cm2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub per_class: [ClassComposition; 6],
    pub total: ClassComposition,
}

/// Slide counts, RoI counts and annotated area per class.
///
/// A slide counts towards class `t` if it carries at least one RoI of `t`.
pub fn summarize_dataset(sets: &[SlideAnnotationSet]) -> DatasetSummary {
    let mut per_class = [ClassComposition::default(); 6];
    for set in sets {
        let mut present = [false; 6];
        for roi in &set.rois {
            let row = &mut per_class[roi.label.code()];
            row.rois += 1;
            row.area_cm2 += polygon_area_cm2(&roi.contour);
            present[roi.label.code()] = true;
        }
        for (row, hit) in per_class.iter_mut().zip(present) {
            row.slides += usize::from(hit);
        }
    }
    let total = per_class.iter().fold(ClassComposition::default(), |acc, r| ClassComposition {
        slides: acc.slides + r.slides,
        rois: acc.rois + r.rois,
        area_cm2: acc.area_cm2 + r.area_cm2,
    });
    DatasetSummary { per_class, total }
}
