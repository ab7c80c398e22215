//! Image values, the Retinex factor maps, and PNG/PPM interchange.
//!
//! Samples are `f64` in `[0, 1]`, stored row-major with interleaved channels
//! (`data[(y * width + x) * channels + c]`). Tensors used by the networks are
//! planar `[C, H, W]`; [`Image::to_tensor`] and [`Image::from_tensor_clamped`]
//! convert between the two.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{} samples", height * width * channels),
                data.len(),
            ));
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Like [`Image::new`] but clamps every sample into `[0, 1]`. NaN is still rejected.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("image samples"));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image size", format!("{height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("channels", format!("{channels} (expected 1 or 3)")));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn expect_congruent(&self, other: &Image) -> Result<()> {
        if self.height != other.height
            || self.width != other.width
            || self.channels != other.channels
        {
            return Err(Error::shape(self.dims_string(), other.dims_string()));
        }
        Ok(())
    }

    pub fn dims_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(
                "crop",
                format!("{height}x{width}+{top}+{left} outside {}", self.dims_string()),
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Planar `[C, H, W]` copy.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + i] = v;
            }
        }
        Tensor::new(vec![c, h, w], out).expect("image dimensions are non-zero")
    }

    /// Builds an image from a planar `[C, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Image> {
        let [c, h, w] = *t.shape() else {
            return Err(Error::shape("[C, H, W]", format!("{:?}", t.shape())));
        };
        let plane = h * w;
        let mut data = vec![0.0; plane * c];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = t.data()[ch * plane + i];
            }
        }
        Image::from_clamped(h, w, c, data)
    }
}

/// Single-channel illumination factor `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationMap(Image);

impl IlluminationMap {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels() != 1 {
            return Err(Error::shape("1 channel", image.channels()));
        }
        Ok(Self(image))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Image::filled(height, width, 1, value)?)
    }

    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        Self::new(Image::from_tensor_clamped(t)?)
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_tensor(&self) -> Tensor {
        self.0.to_tensor()
    }
}

/// Three-channel reflectance factor `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceMap(Image);

impl ReflectanceMap {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::shape("3 channels", image.channels()));
        }
        Ok(Self(image))
    }

    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        Self::new(Image::from_tensor_clamped(t)?)
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_tensor(&self) -> Tensor {
        self.0.to_tensor()
    }
}

/// `out[y, x, c] = L[y, x] * R[y, x, c]`, clamped to `[0, 1]`.
pub fn recompose(l: &IlluminationMap, r: &ReflectanceMap) -> Result<Image> {
    if !l.image().same_size(r.image()) {
        return Err(Error::shape(l.image().dims_string(), r.image().dims_string()));
    }
    let data = r
        .data()
        .chunks_exact(3)
        .zip(l.data())
        .flat_map(|(px, &lv)| px.iter().map(move |&rv| (lv * rv).clamp(0.0, 1.0)))
        .collect();
    Image::new(l.height(), l.width(), 3, data)
}

/// Reads an 8- or 16-bit grayscale/RGB PNG or a binary PPM.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let read_err = |reason: String| Error::ImageRead {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = ImageReader::open(path)
        .map_err(|e| read_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| read_err(e.to_string()))?
        .decode()
        .map_err(|e| read_err(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, normalize(buf.as_raw(), 255.0)),
        DynamicImage::ImageRgb8(buf) => (3, normalize(buf.as_raw(), 255.0)),
        DynamicImage::ImageLuma16(buf) => (1, normalize(buf.as_raw(), 65535.0)),
        DynamicImage::ImageRgb16(buf) => (3, normalize(buf.as_raw(), 65535.0)),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("color model {:?}", other.color()),
            })
        }
    };
    Image::new(h, w, channels, data)
}

fn normalize<T: Copy + Into<f64>>(raw: &[T], max: f64) -> Vec<f64> {
    raw.iter().map(|&v| v.into() / max).collect()
}

/// Writes an 8-bit PNG, quantizing each sample as `round(v * 255)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer sized from image"),
        )
    } else {
        DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer sized from image"),
        )
    };
    dynamic
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Write {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
