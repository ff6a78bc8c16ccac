use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::Serialize;

use super::filters::{highpass, pearson, FilterKernel, Plane};
use crate::error::{Error, Result};
use crate::imaging::{rgb_to_y, Image};
use crate::model::Model;

/// Channel-averaged maps captured from one block for one image.
#[derive(Clone, Debug)]
pub struct BlockCapture {
    /// 0-based.
    pub block_index: usize,
    pub attention_map: Option<Plane>,
    pub feature_in: Plane,
    pub feature_out: Plane,
    pub pi_attn: Option<f64>,
}

/// Anything that can report per-block attention maps for an image.
pub trait AttentionProbe {
    fn capture(&self, image: &Image) -> Result<Vec<BlockCapture>>;
}

impl AttentionProbe for Model {
    fn capture(&self, image: &Image) -> Result<Vec<BlockCapture>> {
        let (_, traces) = self.predict_traced(&image.to_rgb().to_tensor())?;
        Ok(traces
            .into_iter()
            .map(|t| BlockCapture {
                block_index: t.block_index,
                attention_map: t.attention_map.as_ref().map(|m| Plane::channel_mean(m, 0)),
                feature_in: Plane::channel_mean(&t.input_feature, 0),
                feature_out: Plane::channel_mean(&t.output_feature, 0),
                pi_attn: t.weights.first().map(|w| w.pi_attn),
            })
            .collect())
    }
}

/// How [`SyntheticAttention`] builds its attention map from the feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Construction {
    /// High-pass magnitude of the feature divided by its maximum.
    HighPass(FilterKernel),
    /// Min-max normalised feature intensity.
    Intensity,
    Constant(f64),
}

/// A stand-in model with known attention maps, used to calibrate
/// [`attention_stats`]. Block `i` sees the image luma scaled by `i + 1`.
#[derive(Clone, Debug)]
pub struct SyntheticAttention {
    pub n_blocks: usize,
    pub construction: Construction,
}

impl AttentionProbe for SyntheticAttention {
    fn capture(&self, image: &Image) -> Result<Vec<BlockCapture>> {
        let y = rgb_to_y(image);
        let luma = Plane::new(y.width(), y.height(), y.data().to_vec())?;
        (0..self.n_blocks)
            .map(|i| {
                let feature = luma.map(|v| v * (i + 1) as f64);
                let map = match self.construction {
                    Construction::HighPass(k) => {
                        let hp = highpass(&feature, k)?;
                        let peak = hp.max();
                        hp.map(|v| if peak > 0.0 { v / peak } else { 0.0 })
                    }
                    Construction::Intensity => {
                        let lo = feature.data().iter().copied().fold(f64::INFINITY, f64::min);
                        let span = feature.max() - lo;
                        feature.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                    }
                    Construction::Constant(c) => feature.map(|_| c),
                };
                let out = Plane::from_fn(feature.width(), feature.height(), |x, y| {
                    feature.get(x, y) * (1.0 + map.get(x, y))
                });
                Ok(BlockCapture {
                    block_index: i,
                    attention_map: Some(map),
                    feature_in: feature,
                    feature_out: out,
                    pi_attn: None,
                })
            })
            .collect()
    }
}

/// Per-block attention statistics, averaged over an image set.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionRecord {
    /// 0-based.
    pub block_index: usize,
    pub images: usize,
    pub mean: f64,
    pub std: f64,
    /// Mean Pearson r over the images where it is defined; `None` when it
    /// is undefined for every image.
    pub corr: BTreeMap<FilterKernel, Option<f64>>,
    /// Filters whose correlation was undefined for at least one image.
    pub undefined: Vec<FilterKernel>,
    /// Maps of the first image.
    #[serde(skip)]
    pub attention_map: Plane,
    #[serde(skip)]
    pub feature_in: Plane,
    #[serde(skip)]
    pub feature_out: Plane,
}

impl AttentionRecord {
    pub fn corr_value(&self, k: FilterKernel) -> f64 {
        self.corr.get(&k).copied().flatten().unwrap_or(f64::NAN)
    }
}

#[derive(Default)]
struct Accum {
    images: usize,
    mean: f64,
    std: f64,
    r_sum: BTreeMap<FilterKernel, (f64, usize)>,
    undefined: Vec<FilterKernel>,
    first: Option<(Plane, Plane, Plane)>,
}

/// Correlates every block's attention map with high-pass responses of its
/// input feature, per image, then averages over the images.
pub fn attention_stats(probe: &dyn AttentionProbe, images: &[Image]) -> Result<Vec<AttentionRecord>> {
    let mut blocks: BTreeMap<usize, Accum> = BTreeMap::new();
    for image in images {
        for cap in probe.capture(image)? {
            let Some(map) = cap.attention_map else { continue };
            let acc = blocks.entry(cap.block_index).or_default();
            acc.images += 1;
            acc.mean += map.mean();
            acc.std += map.std();
            for k in FilterKernel::ALL {
                let hp = highpass(&cap.feature_in, k)?;
                match pearson(map.data(), hp.data()) {
                    Ok(r) => {
                        let e = acc.r_sum.entry(k).or_insert((0.0, 0));
                        e.0 += r;
                        e.1 += 1;
                    }
                    Err(Error::UndefinedCorrelation(_)) => {
                        if !acc.undefined.contains(&k) {
                            acc.undefined.push(k);
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            if acc.first.is_none() {
                acc.first = Some((map, cap.feature_in, cap.feature_out));
            }
        }
    }
    if blocks.is_empty() {
        warn!("no attention maps captured; the model has no attention generators");
    }
    Ok(blocks
        .into_iter()
        .map(|(block_index, acc)| {
            let n = acc.images as f64;
            let corr = FilterKernel::ALL
                .into_iter()
                .map(|k| {
                    let r = acc.r_sum.get(&k).map(|&(s, c)| s / c as f64);
                    (k, r)
                })
                .collect();
            let (attention_map, feature_in, feature_out) = acc.first.expect("at least one image");
            AttentionRecord {
                block_index,
                images: acc.images,
                mean: acc.mean / n,
                std: acc.std / n,
                corr,
                undefined: acc.undefined,
                attention_map,
                feature_in,
                feature_out,
            }
        })
        .collect())
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.3}")
    }
}

/// Filters as rows, blocks as columns, followed by the mean and std rows.
/// Undefined correlations are written as `NaN`.
pub fn attention_table_csv(records: &[AttentionRecord]) -> String {
    let mut out = String::from("statistic");
    for r in records {
        let _ = write!(out, ",Block {}", r.block_index + 1);
    }
    out.push('\n');
    for k in FilterKernel::ALL {
        out.push_str(k.name());
        for r in records {
            let _ = write!(out, ",{}", cell(r.corr_value(k)));
        }
        out.push('\n');
    }
    let rows: [(&str, fn(&AttentionRecord) -> f64); 2] = [("Mean", |r| r.mean), ("Std", |r| r.std)];
    for (label, get) in rows {
        out.push_str(label);
        for r in records {
            let _ = write!(out, ",{}", cell(get(r)));
        }
        out.push('\n');
    }
    out
}
