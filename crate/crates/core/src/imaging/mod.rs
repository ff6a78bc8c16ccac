//! Images, colour conversion, bicubic degradation and training patches.

mod dataset;
mod patches;
mod resize;
mod synthetic;

use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use dataset::{crop_to_multiple, list_pngs, load_image_dir, load_paired_dir, NamedImage, PairedImages, PairedSet};
pub use patches::{augment, extract_patches, transform_image, PatchPair};
pub use resize::{bicubic_kernel, bicubic_resize, bicubic_weights};
pub use synthetic::synthetic_scene;

/// An image with 1 or 3 channels, interleaved row-major, values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Image{{{}x{}x{}}}",
            self.width, self.height, self.channels
        )
    }
}

impl Image {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::dim(
                "image",
                format!(
                    "{width}x{height}x{channels} needs {} values, got {}",
                    width * height * channels,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image::new(width, height, channels, data)
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Quantises to 8 bits with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Argument(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Image {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    /// Three-channel copy; grayscale is replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// `(1, C, H, W)` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(Shape::new(1, c, h, w), |[_, ci, y, x]| {
            self.data[(y * w + x) * c + ci]
        })
    }

    /// Image from batch item `b` of a tensor, clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, b: usize) -> Result<Image> {
        let [n, c, h, w] = t.shape().0;
        if b >= n {
            return Err(Error::dim("image", format!("batch index {b} out of range for {}", t.shape())));
        }
        Image::from_fn(w, h, c, |x, y, ci| t.at([b, ci, y, x]))
    }
}

/// Loads an 8-bit grayscale or RGB PNG.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => Image::from_u8(w, h, 1, buf.as_raw()),
        DynamicImage::ImageRgb8(buf) => Image::from_u8(w, h, 3, buf.as_raw()),
        other => Err(Error::Image {
            path: path.to_path_buf(),
            detail: format!(
                "unsupported pixel format {:?}; expected 8-bit grayscale or RGB",
                other.color()
            ),
        }),
    }
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = if img.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &img.to_u8(),
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

/// BT.601 studio-swing luma, `Y = (16 + 65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

/// Converts an RGB image to its single-channel luma. Grayscale images pass
/// through unchanged.
pub fn rgb_to_y(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks(3)
        .map(|px| luma(px[0], px[1], px[2]))
        .collect();
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}
