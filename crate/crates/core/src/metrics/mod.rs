//! Y-channel PSNR and SSIM with border cropping.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{load_paired_dir, rgb_to_y, Image, PairedImages};
use crate::model::Model;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Y plane on the 0..255 scale with `border` pixels removed from each side.
/// Returns `(width, height, values)`.
pub fn y_plane(img: &Image, border: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h) = (img.width(), img.height());
    if 2 * border >= w || 2 * border >= h {
        return Err(Error::Argument(format!(
            "border {border} leaves nothing of a {w}x{h} image"
        )));
    }
    let y = rgb_to_y(img);
    let (cw, ch) = (w - 2 * border, h - 2 * border);
    let mut out = Vec::with_capacity(cw * ch);
    for row in border..h - border {
        for col in border..w - border {
            out.push(y.get(col, row, 0) * 255.0);
        }
    }
    Ok((cw, ch, out))
}

fn check_sizes(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Argument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` on the Y channel; `+inf` when the planes match.
pub fn psnr_y(sr: &Image, hr: &Image, border: usize) -> Result<f64> {
    check_sizes(sr, hr)?;
    let (_, _, a) = y_plane(sr, border)?;
    let (_, _, b) = y_plane(hr, border)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Valid-region separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM on the Y channel: 11x11 Gaussian window (sigma 1.5), canonical
/// constants, no padding.
pub fn ssim_y(sr: &Image, hr: &Image, border: usize) -> Result<f64> {
    check_sizes(sr, hr)?;
    let (w, h, a) = y_plane(sr, border)?;
    let (_, _, b) = y_plane(hr, border)?;
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after cropping, got {w}x{h}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, w, h, &taps);
    let mu_b = filter_valid(&b, w, h, &taps);
    let aa = filter_valid(&prod(&a, &a), w, h, &taps);
    let bb = filter_valid(&prod(&b, &b), w, h, &taps);
    let ab = filter_valid(&prod(&a, &b), w, h, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| ssim_from_moments(mu_a[i], mu_b[i], aa[i], bb[i], ab[i]))
        .sum();
    Ok(total / n as f64)
}

/// Local SSIM from windowed first and second moments.
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub file: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub scale: usize,
    pub border: usize,
    /// Sorted by file name.
    pub rows: Vec<EvalRow>,
    /// Pairs that could not be evaluated; excluded from the means.
    pub missing: Vec<String>,
}

impl EvalReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("file,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.file, r.psnr_db, r.ssim);
        }
        if !self.rows.is_empty() {
            let _ = writeln!(out, "mean,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.file.len())
            .chain([4, self.dataset.len()])
            .max()
            .unwrap_or(4);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>7}   (x{}, border {})\n",
            self.dataset, "PSNR(dB)", "SSIM", self.scale, self.border
        );
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>9.3}  {:>7.4}", r.file, r.psnr_db, r.ssim);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.3}  {:>7.4}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        );
        for m in &self.missing {
            let _ = writeln!(out, "missing: {m}");
        }
        out
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    values.sum::<f64>() / n as f64
}

/// Super-resolves one LR image; the output is clamped to `[0, 1]`.
pub fn super_resolve(model: &Model, lr: &Image) -> Result<Image> {
    let sr = model.predict(&lr.to_rgb().to_tensor())?;
    Image::from_tensor(&sr, 0)
}

/// PSNR and SSIM of the model output for one pair, with border = scale.
pub fn evaluate_pair(model: &Model, pair: &PairedImages) -> Result<EvalRow> {
    let sr = super_resolve(model, &pair.lr)?;
    // grayscale references are compared through the same luma transform
    let hr = pair.hr.to_rgb();
    Ok(EvalRow {
        file: pair.name.clone(),
        psnr_db: psnr_y(&sr, &hr, pair.scale)?,
        ssim: ssim_y(&sr, &hr, pair.scale)?,
    })
}

/// Evaluates in-memory pairs; any failure aborts.
pub fn evaluate_pairs(model: &Model, pairs: &[PairedImages]) -> Result<Vec<EvalRow>> {
    pairs.par_iter().map(|p| evaluate_pair(model, p)).collect()
}

/// Evaluates `model` on `<dir>/HR` against `<dir>/LRx{scale}` with
/// border = scale.
pub fn evaluate(model: &Model, dir: &Path, scale: usize) -> Result<EvalReport> {
    if model.config().scale != scale {
        return Err(Error::Argument(format!(
            "model upscales x{}, evaluation asked for x{scale}",
            model.config().scale
        )));
    }
    let set = load_paired_dir(dir, scale, false)?;
    let results: Vec<Result<EvalRow>> = set.pairs.par_iter().map(|p| evaluate_pair(model, p)).collect();
    let mut missing = set.missing;
    let mut rows = Vec::new();
    for (pair, r) in set.pairs.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("{}: {e}", pair.name);
                missing.push(pair.name.clone());
            }
        }
    }
    missing.sort();
    Ok(EvalReport {
        dataset: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        scale,
        border: scale,
        rows,
        missing,
    })
}

/// PSNR/SSIM of plain interpolation of the LR input, the reference every
/// trained model has to beat.
pub fn interpolation_baseline(
    pairs: &[PairedImages],
    upsample: impl Fn(&Image, usize, usize) -> Result<Image>,
) -> Result<Vec<EvalRow>> {
    pairs
        .iter()
        .map(|p| {
            let up = upsample(&p.lr, p.hr.width(), p.hr.height())?;
            Ok(EvalRow {
                file: p.name.clone(),
                psnr_db: psnr_y(&up, &p.hr, p.scale)?,
                ssim: ssim_y(&up, &p.hr, p.scale)?,
            })
        })
        .collect()
}
