use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// How the two branches of a block are combined before the 1x1 fusion conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fusion {
    /// Input-dependent softmax weights from the dynamic attention module.
    A2,
    Addition,
    Concatenation,
    /// Two free trainable scalars, shared by all inputs.
    AdaptiveWeights,
    AttnOnly,
    NonAttnOnly,
}

impl Fusion {
    pub const ALL: [Fusion; 6] = [
        Fusion::AttnOnly,
        Fusion::NonAttnOnly,
        Fusion::Addition,
        Fusion::Concatenation,
        Fusion::AdaptiveWeights,
        Fusion::A2,
    ];

    pub fn has_attention_branch(self) -> bool {
        self != Fusion::NonAttnOnly
    }

    pub fn has_non_attention_branch(self) -> bool {
        self != Fusion::AttnOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Fusion::A2 => "A2",
            Fusion::Addition => "Addition",
            Fusion::Concatenation => "Concatenation",
            Fusion::AdaptiveWeights => "AdaptiveWeights",
            Fusion::AttnOnly => "AttnOnly",
            Fusion::NonAttnOnly => "NonAttnOnly",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown fusion mode {s:?}")))
    }
}

/// Interpolation used for the global skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipInterp {
    Bilinear,
    Nearest,
}

/// Which blocks keep their attention generator.
///
/// Serialised as `"all"`, `"none"`, a list of 1-based block indices, or a
/// bit string such as `"1010101010"` (first character is block 1).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum BlockMask {
    #[default]
    All,
    None,
    /// 1-based indices of enabled blocks.
    Blocks(BTreeSet<usize>),
}

impl BlockMask {
    pub fn blocks(indices: impl IntoIterator<Item = usize>) -> Self {
        BlockMask::Blocks(indices.into_iter().collect())
    }

    /// Whether block `i` (0-based) has attention enabled.
    pub fn enabled(&self, i: usize) -> bool {
        match self {
            BlockMask::All => true,
            BlockMask::None => false,
            BlockMask::Blocks(set) => set.contains(&(i + 1)),
        }
    }

    pub fn count_enabled(&self, n_blocks: usize) -> usize {
        (0..n_blocks).filter(|&i| self.enabled(i)).count()
    }

    pub fn from_bits(bits: &str) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, ch) in bits.chars().enumerate() {
            match ch {
                '1' => {
                    set.insert(i + 1);
                }
                '0' => {}
                _ => return Err(Error::Argument(format!("invalid mask bit string {bits:?}"))),
            }
        }
        Ok(BlockMask::Blocks(set))
    }

    pub fn label(&self) -> String {
        match self {
            BlockMask::All => "All".into(),
            BlockMask::None => "None".into(),
            BlockMask::Blocks(set) => {
                let items: Vec<String> = set.iter().map(|i| i.to_string()).collect();
                format!("{{{}}}", items.join(","))
            }
        }
    }
}

impl std::str::FromStr for BlockMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("all") {
            return Ok(BlockMask::All);
        }
        if t.eq_ignore_ascii_case("none") {
            return Ok(BlockMask::None);
        }
        if !t.is_empty() && t.chars().all(|c| c == '0' || c == '1') {
            return BlockMask::from_bits(t);
        }
        let inner = t.trim_start_matches('{').trim_end_matches('}');
        let set = inner
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Argument(format!("invalid block mask {s:?}")))
            })
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(BlockMask::Blocks(set))
    }
}

impl Serialize for BlockMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BlockMask::All => s.serialize_str("all"),
            BlockMask::None => s.serialize_str("none"),
            BlockMask::Blocks(set) => set.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for BlockMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(BTreeSet<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
            Raw::List(set) => Ok(BlockMask::Blocks(set)),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub upsample_channels: usize,
    pub scale: usize,
    /// Kernel of the non-attention branch conv: 3 (A²N) or 1 (A²N-M).
    pub non_attn_kernel: usize,
    pub fusion: Fusion,
    pub attention_enabled: BlockMask,
    /// Bottleneck reduction of the dynamic attention module.
    pub reduction: usize,
    pub skip_interp: SkipInterp,
    /// Replaces the attention-branch logit of every dynamic attention module
    /// with this constant (ablation only).
    pub attn_logit_override: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::a2n(4)
    }
}

impl ModelConfig {
    /// Full-size A²N: 16 blocks of 40 channels, 24 channels in the upsampler.
    pub fn a2n(scale: usize) -> Self {
        ModelConfig {
            n_blocks: 16,
            channels: 40,
            upsample_channels: 24,
            scale,
            non_attn_kernel: 3,
            fusion: Fusion::A2,
            attention_enabled: BlockMask::All,
            reduction: 4,
            skip_interp: SkipInterp::Bilinear,
            attn_logit_override: None,
        }
    }

    /// A²N-M: 1x1 conv in the non-attention branch.
    pub fn a2n_m(scale: usize) -> Self {
        ModelConfig {
            non_attn_kernel: 1,
            ..ModelConfig::a2n(scale)
        }
    }

    /// Small configuration for tests and desk-scale runs.
    pub fn desk(n_blocks: usize, channels: usize, scale: usize) -> Self {
        ModelConfig {
            n_blocks,
            channels,
            upsample_channels: channels,
            ..ModelConfig::a2n(scale)
        }
    }

    /// The ten-block residual attention probe network. Blocks outside
    /// `enabled` lose their attention generator.
    pub fn probe(enabled: BlockMask, channels: usize, scale: usize) -> Self {
        ModelConfig {
            n_blocks: 10,
            channels,
            upsample_channels: channels,
            fusion: Fusion::AttnOnly,
            attention_enabled: enabled,
            ..ModelConfig::a2n(scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_blocks < 1 {
            return fail("n_blocks must be >= 1".into());
        }
        if self.channels < 1 || self.upsample_channels < 1 {
            return fail("channel counts must be >= 1".into());
        }
        if self.reduction < 1 || self.channels % self.reduction != 0 {
            return fail(format!(
                "channels ({}) must be divisible by reduction ({})",
                self.channels, self.reduction
            ));
        }
        if !(2..=4).contains(&self.scale) {
            return fail(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        if self.non_attn_kernel != 1 && self.non_attn_kernel != 3 {
            return fail(format!(
                "non_attn_kernel must be 1 or 3, got {}",
                self.non_attn_kernel
            ));
        }
        if let BlockMask::Blocks(set) = &self.attention_enabled {
            if let Some(&bad) = set.iter().find(|&&i| i < 1 || i > self.n_blocks) {
                return fail(format!(
                    "attention mask names block {bad}, valid range is 1..={}",
                    self.n_blocks
                ));
            }
        }
        if let Some(v) = self.attn_logit_override {
            if !v.is_finite() {
                return fail("attn_logit_override must be finite".into());
            }
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / self.reduction
    }
}
