use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{crop_to_multiple, PairedImages};
use super::{bicubic_resize, Image};
use crate::error::{Error, Result};

/// Spatially aligned low/high resolution crops.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: Image,
    pub hr: Image,
    pub scale: usize,
    /// Top-left corner of the LR crop inside its source image.
    pub lr_origin: (usize, usize),
}

impl PairedImages {
    /// Draws one aligned patch pair with a uniformly random LR origin.
    pub fn sample_patch(&self, rng: &mut impl Rng, lr_patch: usize) -> Result<PatchPair> {
        let (lw, lh) = (self.lr.width(), self.lr.height());
        if lr_patch == 0 || lr_patch > lw || lr_patch > lh {
            return Err(Error::Argument(format!(
                "patch {lr_patch} does not fit LR image {lw}x{lh}"
            )));
        }
        let x = rng.gen_range(0..=lw - lr_patch);
        let y = rng.gen_range(0..=lh - lr_patch);
        self.patch_at(x, y, lr_patch)
    }

    pub fn patch_at(&self, x: usize, y: usize, lr_patch: usize) -> Result<PatchPair> {
        let s = self.scale;
        Ok(PatchPair {
            lr: self.lr.crop(x, y, lr_patch, lr_patch)?,
            hr: self.hr.crop(x * s, y * s, lr_patch * s, lr_patch * s)?,
            scale: s,
            lr_origin: (x, y),
        })
    }
}

/// Cuts `count` aligned patch pairs from an HR image.
///
/// The HR image is centre-cropped to a multiple of `scale` and degraded with
/// [`bicubic_resize`]; LR origins are drawn from a ChaCha8 stream seeded with
/// `seed`. An image too small for one patch yields no pairs and a warning.
pub fn extract_patches(
    hr: &Image,
    scale: usize,
    lr_patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if scale == 0 || lr_patch == 0 {
        return Err(Error::Argument("scale and patch size must be positive".into()));
    }
    if hr.width() < lr_patch * scale || hr.height() < lr_patch * scale {
        warn!(
            "skipping {}x{} image: smaller than a {}x{} HR patch",
            hr.width(),
            hr.height(),
            lr_patch * scale,
            lr_patch * scale
        );
        return Ok(Vec::new());
    }
    let hr = crop_to_multiple(hr, scale)?;
    let lr = bicubic_resize(&hr, hr.width() / scale, hr.height() / scale)?;
    let pair = PairedImages {
        name: String::new(),
        hr,
        lr,
        scale,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| pair.sample_patch(&mut rng, lr_patch))
        .collect()
}

/// Applies one of the eight dihedral transforms.
///
/// `code % 4` counts clockwise quarter turns and `code >= 4` adds a
/// horizontal flip applied before the rotation. A quarter turn maps pixel
/// `(row i, col j)` of an `H`-row image to `(row j, col H-1-i)`.
pub fn transform_image(img: &Image, code: u8) -> Result<Image> {
    if code > 7 {
        return Err(Error::Argument(format!("augmentation code must be 0..=7, got {code}")));
    }
    let mut out = if code >= 4 { flip_horizontal(img) } else { img.clone() };
    for _ in 0..code % 4 {
        out = rotate_cw(&out);
    }
    Ok(out)
}

fn flip_horizontal(img: &Image) -> Image {
    let (w, c) = (img.width, img.channels);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in (0..w).rev() {
            let start = (y * w + x) * c;
            data.extend_from_slice(&img.data[start..start + c]);
        }
    }
    Image { data, ..img.clone() }
}

fn rotate_cw(img: &Image) -> Image {
    let (w, h, c) = (img.width, img.height, img.channels);
    // output has h columns and w rows
    let mut data = vec![0.0; img.data.len()];
    for i in 0..h {
        for j in 0..w {
            let (r, col) = (j, h - 1 - i);
            let dst = (r * h + col) * c;
            let src = (i * w + j) * c;
            data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    Image {
        width: h,
        height: w,
        channels: c,
        data,
    }
}

/// Transforms both members of a pair identically.
pub fn augment(pair: &PatchPair, code: u8) -> Result<PatchPair> {
    Ok(PatchPair {
        lr: transform_image(&pair.lr, code)?,
        hr: transform_image(&pair.hr, code)?,
        scale: pair.scale,
        lr_origin: pair.lr_origin,
    })
}
