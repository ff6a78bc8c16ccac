use std::path::{Path, PathBuf};

use super::filters::Plane;
use super::stats::AttentionRecord;
use crate::error::{Error, Result};
use crate::imaging::{save_png, Image};

/// Brightness colormap over `[0, 1]`: black -> red -> orange -> yellow ->
/// white. 0.5 maps to (255, 128, 0), 1.0 to white.
pub fn hot(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let ch = |t: f64| (t.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
    [ch(2.0 * v), ch(2.0 * v - 0.5), ch(2.0 * v - 1.0)]
}

/// Diverging colormap centred at 0: white at 0, red for positive, blue for
/// negative. `t` is the value divided by the largest magnitude of the map.
pub fn diverging(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(-1.0, 1.0) };
    let fade = ((1.0 - t.abs()) * 255.0 + 0.5).floor() as u8;
    if t >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

fn render(plane: &Plane, color: impl Fn(f64) -> [u8; 3]) -> Result<Image> {
    let bytes: Vec<u8> = plane.data().iter().flat_map(|&v| color(v)).collect();
    Image::from_u8(plane.width(), plane.height(), 3, &bytes)
}

pub fn attention_heatmap(map: &Plane) -> Result<Image> {
    render(map, hot)
}

pub fn feature_heatmap(feature: &Plane) -> Result<Image> {
    let peak = feature.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    render(feature, |v| diverging(if peak > 0.0 { v / peak } else { 0.0 }))
}

/// Writes `block{NN}_{attn|feat_in|feat_out}.png` per record, with 1-based
/// block numbers. Returns the written paths in order.
pub fn export_heatmaps(records: &[AttentionRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Argument("no attention records to export".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for r in records {
        let n = r.block_index + 1;
        for (kind, img) in [
            ("attn", attention_heatmap(&r.attention_map)?),
            ("feat_in", feature_heatmap(&r.feature_in)?),
            ("feat_out", feature_heatmap(&r.feature_out)?),
        ] {
            let path = out_dir.join(format!("block{n:02}_{kind}.png"));
            save_png(&img, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_contract() {
        assert_eq!(hot(0.0), [0, 0, 0]);
        assert_eq!(hot(0.5), [255, 128, 0]);
        assert_eq!(hot(1.0), [255, 255, 255]);
        assert_eq!(diverging(0.0), [255, 255, 255]);
        assert_eq!(diverging(1.0), [255, 0, 0]);
        assert_eq!(diverging(-1.0), [0, 0, 255]);
    }

    #[test]
    fn zero_feature_is_white() {
        let img = feature_heatmap(&Plane::from_fn(4, 3, |_, _| 0.0)).unwrap();
        assert!(img.to_u8().iter().all(|&b| b == 255));
    }

    #[test]
    fn hot_brightness_is_monotone() {
        let lum = |c: [u8; 3]| c.iter().map(|&v| v as u32).sum::<u32>();
        for i in 0..100 {
            assert!(lum(hot(i as f64 / 100.0)) <= lum(hot((i + 1) as f64 / 100.0)));
        }
    }
}
