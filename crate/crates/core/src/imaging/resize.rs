use super::Image;
use crate::error::{Error, Result};

const A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn bicubic_kernel(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample source taps `(index, weight)` for resampling a line of
/// `in_len` samples to `out_len` samples.
///
/// Sample centres sit at half-pixel offsets. When shrinking, the kernel is
/// stretched by the inverse scale so that it also acts as the anti-aliasing
/// prefilter. Indices are clamped to the edge and the weights of every
/// output sample are normalised to sum to one.
pub fn bicubic_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let shrink = scale.min(1.0);
    let support = 2.0 / shrink;
    (0..out_len)
        .map(|i| {
            let centre = (i as f64 + 0.5) / scale - 0.5;
            let first = (centre - support).floor() as isize;
            let last = (centre + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in first..=last {
                let w = bicubic_kernel((centre - j as f64) * shrink);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resampling to `out_w x out_h`.
pub fn bicubic_resize(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Argument(format!(
            "target size must be positive, got {out_w}x{out_h}"
        )));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::Argument("cannot resize an empty image".into()));
    }
    let c = img.channels;
    let wx = bicubic_weights(img.width, out_w);
    let wy = bicubic_weights(img.height, out_h);

    // horizontal pass: (in_h, out_w)
    let mut tmp = vec![0.0; img.height * out_w * c];
    for y in 0..img.height {
        let src = &img.data[y * img.width * c..(y + 1) * img.width * c];
        let dst = &mut tmp[y * out_w * c..(y + 1) * out_w * c];
        for (x, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                dst[x * c + ch] = taps.iter().map(|&(j, w)| w * src[j * c + ch]).sum();
            }
        }
    }
    // vertical pass: (out_h, out_w)
    let row = out_w * c;
    let mut out = vec![0.0; out_h * row];
    for (y, taps) in wy.iter().enumerate() {
        let dst = &mut out[y * row..(y + 1) * row];
        for &(j, w) in taps {
            let src = &tmp[j * row..(j + 1) * row];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
        }
    }
    Image::new(out_w, out_h, c, out)
}
