//! 8-bit raster buffers, Luma conversion and PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("expected {expected}-channel image, got {got} channels")]
    WrongChannelCount { expected: u8, got: u8 },
    #[error("invalid image geometry: {0}")]
    InvalidGeometry(String),
    #[error("PNG I/O failed for {path}: {source}")]
    Png {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major, channel-interleaved 8-bit image with 1 or 3 channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: u8,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: u8, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidGeometry(format!("{width}x{height} has no pixels")));
        }
        if channels != 1 && channels != 3 {
            return Err(RasterError::InvalidGeometry(format!("{channels} channels (need 1 or 3)")));
        }
        if data.len() != width * height * channels as usize {
            return Err(RasterError::InvalidGeometry(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, channels, data })
    }

    /// Image filled with a single pixel value.
    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Result<Self, RasterError> {
        let data = pixel.iter().copied().cycle().take(width * height * pixel.len()).collect();
        Self::new(width, height, pixel.len() as u8, data)
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn<const C: usize>(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; C]) -> Self {
        assert!(C == 1 || C == 3, "images have 1 or 3 channels");
        let mut data = Vec::with_capacity(width * height * C);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, C as u8, data).expect("from_fn geometry")
    }

    /// Like [`ImageBuffer::from_fn`] with a runtime channel count.
    pub fn from_fn_dyn<'a>(width: usize, height: usize, channels: u8, f: impl Fn(usize, usize) -> &'a [u8]) -> Self {
        let mut data = Vec::with_capacity(width * height * channels as usize);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(f(x, y));
            }
        }
        Self::new(width, height, channels, data).expect("from_fn_dyn geometry")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let c = self.channels as usize;
        let i = (y * self.width + x) * c;
        &self.data[i..i + c]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let c = self.channels as usize;
        let i = (y * self.width + x) * c;
        &mut self.data[i..i + c]
    }

    pub fn row(&self, y: usize) -> &[u8] {
        let stride = self.width * self.channels as usize;
        &self.data[y * stride..(y + 1) * stride]
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self, RasterError> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(RasterError::InvalidGeometry(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels as usize;
        let mut data = Vec::with_capacity(w * h * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self::new(w, h, self.channels, data)
    }

    /// Mirror image across the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let c = self.channels as usize;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(self.width - 1 - x, y);
                out.data[(y * self.width + x) * c..][..c].copy_from_slice(src);
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let stride = self.width * self.channels as usize;
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * stride..(y + 1) * stride]);
        }
        ImageBuffer { data, ..*self }
    }

    pub fn map_samples(&self, f: impl Fn(u8) -> u8) -> Self {
        ImageBuffer { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let path = path.as_ref();
        let png_err = |source| RasterError::Png { path: path.display().to_string(), source };
        let img = image::open(path).map_err(png_err)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 | 2 => Self::new(w, h, 1, img.into_luma8().into_raw()),
            _ => Self::new(w, h, 3, img.into_rgb8().into_raw()),
        }
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let path = path.as_ref();
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| RasterError::Png { path: path.display().to_string(), source })
    }
}

/// Weights of the R, G, B channels in the Luma transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumaWeights {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl LumaWeights {
    /// ITU-R BT.601 coefficients.
    pub const REC601: LumaWeights = LumaWeights { r: 0.299, g: 0.587, b: 0.114 };
}

impl Default for LumaWeights {
    fn default() -> Self {
        Self::REC601
    }
}

/// Rounds half away from zero and clamps to the 8-bit range.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn to_luma(img: &ImageBuffer) -> Result<ImageBuffer, RasterError> {
    to_luma_with(img, LumaWeights::REC601)
}

pub fn to_luma_with(img: &ImageBuffer, w: LumaWeights) -> Result<ImageBuffer, RasterError> {
    if img.channels != 3 {
        return Err(RasterError::WrongChannelCount { expected: 3, got: img.channels });
    }
    let data =
        img.data.chunks_exact(3).map(|p| quantize(w.r * p[0] as f64 + w.g * p[1] as f64 + w.b * p[2] as f64)).collect();
    ImageBuffer::new(img.width, img.height, 1, data)
}

/// Copies a single-channel image into three identical channels.
pub fn replicate_gray(img: &ImageBuffer) -> Result<ImageBuffer, RasterError> {
    if img.channels != 1 {
        return Err(RasterError::WrongChannelCount { expected: 1, got: img.channels });
    }
    let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
    ImageBuffer::new(img.width, img.height, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn luma_of_primaries() {
        let img = ImageBuffer::new(3, 1, 3, vec![255, 255, 255, 0, 0, 0, 255, 0, 0]).unwrap();
        assert_eq!(to_luma(&img).unwrap().data(), &[255, 0, 76]);
    }

    #[test]
    fn luma_rejects_gray_input() {
        let g = ImageBuffer::filled(2, 2, &[9]).unwrap();
        assert!(matches!(to_luma(&g), Err(RasterError::WrongChannelCount { expected: 3, got: 1 })));
        let rgb = ImageBuffer::filled(2, 2, &[9, 9, 9]).unwrap();
        assert!(matches!(replicate_gray(&rgb), Err(RasterError::WrongChannelCount { expected: 1, got: 3 })));
    }

    #[test]
    fn replicate_single_pixel() {
        let g = ImageBuffer::new(1, 1, 1, vec![7]).unwrap();
        assert_eq!(replicate_gray(&g).unwrap().data(), &[7, 7, 7]);
    }

    #[test]
    fn replicate_gradient() {
        let g = ImageBuffer::new(2, 2, 1, vec![0, 85, 170, 255]).unwrap();
        let rgb = replicate_gray(&g).unwrap();
        assert_eq!((rgb.width(), rgb.height(), rgb.channels()), (2, 2, 3));
        for p in rgb.data().chunks(3) {
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
    }

    #[test]
    fn geometry_is_validated() {
        assert!(ImageBuffer::new(0, 1, 1, vec![]).is_err());
        assert!(ImageBuffer::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0; 3]).is_err());
    }

    #[test]
    fn crop_and_flips() {
        let img = ImageBuffer::from_fn(3, 2, |x, y| [(x + 10 * y) as u8]);
        assert_eq!(img.crop(1, 0, 2, 2).unwrap().data(), &[1, 2, 11, 12]);
        assert_eq!(img.flip_horizontal().data(), &[2, 1, 0, 12, 11, 10]);
        assert_eq!(img.flip_vertical().data(), &[10, 11, 12, 0, 1, 2]);
        assert!(img.crop(2, 0, 2, 1).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = ImageBuffer::from_fn(5, 4, |x, y| [x as u8 * 40, y as u8 * 60, 7]);
        let gray = ImageBuffer::from_fn(4, 5, |x, y| [(x * y) as u8]);
        rgb.write_png(dir.path().join("a.png")).unwrap();
        gray.write_png(dir.path().join("b.png")).unwrap();
        assert_eq!(ImageBuffer::read_png(dir.path().join("a.png")).unwrap(), rgb);
        assert_eq!(ImageBuffer::read_png(dir.path().join("b.png")).unwrap(), gray);
    }

    proptest! {
        #[test]
        fn luma_within_channel_range(px in proptest::collection::vec(any::<u8>(), 3..=48)) {
            let n = px.len() / 3;
            let img = ImageBuffer::new(n, 1, 3, px[..n * 3].to_vec()).unwrap();
            let y = to_luma(&img).unwrap();
            for (p, &l) in img.data().chunks(3).zip(y.data()) {
                let lo = *p.iter().min().unwrap();
                let hi = *p.iter().max().unwrap();
                prop_assert!(lo <= l && l <= hi);
            }
        }

        #[test]
        fn luma_inverts_replication(px in proptest::collection::vec(any::<u8>(), 1..64)) {
            let g = ImageBuffer::new(px.len(), 1, 1, px).unwrap();
            prop_assert_eq!(to_luma(&replicate_gray(&g).unwrap()).unwrap(), g);
        }
    }
}
