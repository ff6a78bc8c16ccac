use std::path::{Path, PathBuf};

use log::warn;

use super::{bicubic_resize, load_png, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct NamedImage {
    /// File stem.
    pub name: String,
    pub image: Image,
}

/// A full HR image and its LR counterpart.
#[derive(Clone, Debug)]
pub struct PairedImages {
    pub name: String,
    pub hr: Image,
    pub lr: Image,
    pub scale: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PairedSet {
    pub pairs: Vec<PairedImages>,
    /// Stems present in `HR/` without a matching LR file.
    pub missing: Vec<String>,
}

/// Centre-crops so both dimensions are multiples of `scale`.
pub fn crop_to_multiple(img: &Image, scale: usize) -> Result<Image> {
    let w = img.width() - img.width() % scale;
    let h = img.height() - img.height() % scale;
    if w == 0 || h == 0 {
        return Err(Error::Argument(format!(
            "{}x{} image is smaller than scale {scale}",
            img.width(),
            img.height()
        )));
    }
    img.crop((img.width() - w) / 2, (img.height() - h) / 2, w, h)
}

/// `*.png` files of a directory, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_image_dir(dir: &Path) -> Result<Vec<NamedImage>> {
    list_pngs(dir)?
        .into_iter()
        .map(|p| {
            Ok(NamedImage {
                name: stem(&p),
                image: load_png(&p)?,
            })
        })
        .collect()
}

/// Loads `<root>/HR/*.png` with their `<root>/LRx{scale}/*.png` partners.
///
/// HR images are centre-cropped to a multiple of `scale`. When
/// `synthesize_lr` is set, a missing LR partner is produced by bicubic
/// downsampling; otherwise the stem is listed in [`PairedSet::missing`].
/// LR files whose size does not match the cropped HR image are reported as
/// missing as well.
pub fn load_paired_dir(root: &Path, scale: usize, synthesize_lr: bool) -> Result<PairedSet> {
    let hr_dir = root.join("HR");
    let lr_dir = root.join(format!("LRx{scale}"));
    let mut set = PairedSet::default();
    for path in list_pngs(&hr_dir)? {
        let name = stem(&path);
        let hr = crop_to_multiple(&load_png(&path)?, scale)?;
        let (lw, lh) = (hr.width() / scale, hr.height() / scale);
        let lr_path = lr_dir.join(format!("{name}.png"));
        let lr = if lr_path.is_file() {
            let lr = load_png(&lr_path)?;
            if lr.width() != lw || lr.height() != lh || lr.channels() != hr.channels() {
                warn!(
                    "{}: LR is {}x{}, expected {lw}x{lh}",
                    lr_path.display(),
                    lr.width(),
                    lr.height()
                );
                set.missing.push(name);
                continue;
            }
            lr
        } else if synthesize_lr {
            bicubic_resize(&hr, lw, lh)?
        } else {
            set.missing.push(name);
            continue;
        };
        set.pairs.push(PairedImages {
            name,
            hr,
            lr,
            scale,
        });
    }
    Ok(set)
}
