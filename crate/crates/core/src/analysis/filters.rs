use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel 2-D map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Argument(format!(
                "{} values for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    /// Mean over the channels of batch item `b`.
    pub fn channel_mean(t: &Tensor, b: usize) -> Plane {
        let [_, c, h, w] = t.shape().0;
        let mut acc = vec![0.0; h * w];
        for ci in 0..c {
            for (a, v) in acc.iter_mut().zip(t.plane(b, ci)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|v| *v /= c as f64);
        Plane {
            width: w,
            height: h,
            data: acc,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation. Values are taken relative to the
    /// first one, so a constant map gives exactly 0.
    pub fn std(&self) -> f64 {
        let Some(&x0) = self.data.first() else {
            return f64::NAN;
        };
        let n = self.data.len() as f64;
        let m = self.data.iter().map(|v| v - x0).sum::<f64>() / n;
        let ss: f64 = self.data.iter().map(|v| (v - x0 - m) * (v - x0 - m)).sum();
        (ss / n).sqrt()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterKernel {
    Laplace,
    Scharr,
    Sobel,
}

impl FilterKernel {
    pub const ALL: [FilterKernel; 3] = [FilterKernel::Laplace, FilterKernel::Scharr, FilterKernel::Sobel];

    /// The 3x3 grids: one for Laplace, `[Gx, Gy]` for the gradient operators.
    pub fn coefficients(self) -> Vec<[[f64; 3]; 3]> {
        let gx = |a: f64, b: f64| [[-a, 0.0, a], [-b, 0.0, b], [-a, 0.0, a]];
        let transpose = |k: [[f64; 3]; 3]| {
            let mut t = [[0.0; 3]; 3];
            for (i, row) in k.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    t[j][i] = v;
                }
            }
            t
        };
        match self {
            FilterKernel::Laplace => vec![[[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]],
            FilterKernel::Sobel => vec![gx(1.0, 2.0), transpose(gx(1.0, 2.0))],
            FilterKernel::Scharr => vec![gx(3.0, 10.0), transpose(gx(3.0, 10.0))],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterKernel::Laplace => "Laplace",
            FilterKernel::Scharr => "Scharr",
            FilterKernel::Sobel => "Sobel",
        }
    }
}

impl fmt::Display for FilterKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FilterKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKernel::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown filter {s:?}")))
    }
}

/// 3x3 correlation with edge-clamped borders.
fn correlate(map: &Plane, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let (w, h) = (map.width as isize, map.height as isize);
    let mut out = Vec::with_capacity(map.data.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let sy = (y + dy as isize - 1).clamp(0, h - 1);
                for (dx, &c) in row.iter().enumerate() {
                    let sx = (x + dx as isize - 1).clamp(0, w - 1);
                    acc += c * map.data[(sy * w + sx) as usize];
                }
            }
            out.push(acc);
        }
    }
    out
}

/// High-pass magnitude: `|Laplace|`, or `sqrt(Gx^2 + Gy^2)` for Sobel and
/// Scharr.
pub fn highpass(map: &Plane, kernel: FilterKernel) -> Result<Plane> {
    highpass_with(map, kernel, false)
}

/// Like [`highpass`]; with `signed` the Laplace response keeps its sign.
/// The gradient operators always return a magnitude.
pub fn highpass_with(map: &Plane, kernel: FilterKernel, signed: bool) -> Result<Plane> {
    if map.width < 3 || map.height < 3 {
        return Err(Error::Argument(format!(
            "high-pass filtering needs at least 3x3, got {}x{}",
            map.width, map.height
        )));
    }
    let responses: Vec<Vec<f64>> = kernel.coefficients().iter().map(|k| correlate(map, k)).collect();
    let data = match responses.as_slice() {
        [single] if signed => single.clone(),
        [single] => single.iter().map(|v| v.abs()).collect(),
        [gx, gy] => gx.iter().zip(gy).map(|(a, b)| a.hypot(*b)).collect(),
        _ => unreachable!("kernels have one or two grids"),
    };
    Plane::new(map.width, map.height, data)
}

/// Sample Pearson correlation, computed in two passes. Inputs whose spread
/// is zero up to rounding have no defined correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument(format!(
            "pearson needs two equal-length inputs of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let flat = |s: f64, v: &[f64]| {
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        s <= n * (1e-12 * scale).powi(2)
    };
    if flat(saa, a) || flat(sbb, b) {
        return Err(Error::UndefinedCorrelation("an input has zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
