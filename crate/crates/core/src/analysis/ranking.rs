use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use super::filters::Plane;
use super::heatmap::attention_heatmap;
use super::stats::AttentionProbe;
use crate::error::{Error, Result};
use crate::imaging::{save_png, Image};

/// One (block, image) capture with its attention-branch weight.
#[derive(Clone, Debug)]
pub struct RankedCapture {
    /// 0-based.
    pub block_index: usize,
    /// Index of the image in the analysed set.
    pub sample: usize,
    pub pi_attn: f64,
    pub attention_map: Option<Plane>,
}

#[derive(Clone, Debug, Default)]
pub struct BranchRanking {
    /// Highest pi_attn first.
    pub top: Vec<RankedCapture>,
    /// Lowest pi_attn first.
    pub bottom: Vec<RankedCapture>,
}

/// Descending by pi_attn; equal weights ordered by (block, sample).
pub fn compare_captures(a: &RankedCapture, b: &RankedCapture) -> Ordering {
    b.pi_attn
        .total_cmp(&a.pi_attn)
        .then(a.block_index.cmp(&b.block_index))
        .then(a.sample.cmp(&b.sample))
}

/// Collects every block's pi_attn over `images` and returns the `k` highest
/// and `k` lowest. `k` larger than the number of captures is clamped.
pub fn rank_branch_weights(
    probe: &dyn AttentionProbe,
    images: &[Image],
    k: usize,
) -> Result<BranchRanking> {
    let mut captures = Vec::new();
    for (sample, image) in images.iter().enumerate() {
        for cap in probe.capture(image)? {
            if let Some(pi_attn) = cap.pi_attn {
                captures.push(RankedCapture {
                    block_index: cap.block_index,
                    sample,
                    pi_attn,
                    attention_map: cap.attention_map,
                });
            }
        }
    }
    Ok(rank_captures(captures, k))
}

pub fn rank_captures(mut captures: Vec<RankedCapture>, k: usize) -> BranchRanking {
    if captures.is_empty() {
        warn!("no dynamic branch weights captured");
        return BranchRanking::default();
    }
    let k = if k > captures.len() {
        warn!("k = {k} exceeds the {} captures; clamping", captures.len());
        captures.len()
    } else {
        k
    };
    captures.sort_by(compare_captures);
    let top = captures[..k].to_vec();
    // lowest first, ties still in (block, sample) order
    let mut bottom = captures[captures.len() - k..].to_vec();
    bottom.sort_by(|a, b| {
        a.pi_attn
            .total_cmp(&b.pi_attn)
            .then(a.block_index.cmp(&b.block_index))
            .then(a.sample.cmp(&b.sample))
    });
    BranchRanking { top, bottom }
}

impl BranchRanking {
    /// `rank,kind,block,sample,pi_attn` with 1-based block numbers and
    /// weights to three decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,kind,block,sample,pi_attn\n");
        for (kind, list) in [("top", &self.top), ("bottom", &self.bottom)] {
            for (i, c) in list.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{kind},{},{},{:.3}",
                    i + 1,
                    c.block_index + 1,
                    c.sample,
                    c.pi_attn
                );
            }
        }
        out
    }

    /// Writes `ranking.csv` and one heatmap per ranked capture that has an
    /// attention map.
    pub fn export(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv = out_dir.join("ranking.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let mut written = vec![csv];
        for (kind, list) in [("top", &self.top), ("bottom", &self.bottom)] {
            for (i, c) in list.iter().enumerate() {
                if let Some(map) = &c.attention_map {
                    let path = out_dir.join(format!(
                        "{kind}{:02}_block{:02}_img{:03}_pi{:.3}.png",
                        i + 1,
                        c.block_index + 1,
                        c.sample,
                        c.pi_attn
                    ));
                    save_png(&attention_heatmap(map)?, &path)?;
                    written.push(path);
                }
            }
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(block_index: usize, sample: usize, pi_attn: f64) -> RankedCapture {
        RankedCapture {
            block_index,
            sample,
            pi_attn,
            attention_map: None,
        }
    }

    #[test]
    fn ties_break_by_block_then_sample() {
        let r = rank_captures(vec![cap(2, 0, 0.5), cap(1, 1, 0.5), cap(1, 0, 0.5), cap(0, 0, 0.9)], 4);
        let order: Vec<_> = r.top.iter().map(|c| (c.block_index, c.sample)).collect();
        assert_eq!(order, vec![(0, 0), (1, 0), (1, 1), (2, 0)]);
        let low: Vec<_> = r.bottom.iter().map(|c| (c.block_index, c.sample)).collect();
        assert_eq!(low, vec![(1, 0), (1, 1), (2, 0), (0, 0)]);
    }

    #[test]
    fn k_is_clamped() {
        let r = rank_captures(vec![cap(0, 0, 0.2), cap(1, 0, 0.7)], 5);
        assert_eq!(r.top.len(), 2);
        assert_eq!(r.top[0].block_index, 1);
        assert_eq!(r.bottom[0].block_index, 0);
        assert!(r.to_csv().contains("1,top,2,0,0.700"));
    }
}
