use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, ModelConfig, SkipInterp};
use crate::error::{Error, Result};
use crate::tensor::{ops, Graph, ParamId, ParamStore, Shape, Tensor, Var};

/// Per-sample branch weights produced by the dynamic attention module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicWeights {
    pub pi_na: f64,
    pub pi_attn: f64,
}

/// What a block exposes when tracing is requested.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub block_index: usize,
    /// One entry per batch sample; empty unless the block fuses with
    /// [`Fusion::A2`].
    pub weights: Vec<DynamicWeights>,
    /// Sigmoid attention map `(B, C, H, W)`, when the block has a generator.
    pub attention_map: Option<Tensor>,
    pub input_feature: Tensor,
    pub output_feature: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttentionBranch {
    conv1: Conv,
    conv2: Conv,
    /// `None` when the attention generator has been removed.
    gate: Option<Conv>,
}

#[derive(Clone, Copy, Debug)]
struct DynamicAttention {
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    fc2_weight: ParamId,
    fc2_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    non_attention: Option<Conv>,
    attention: Option<AttentionBranch>,
    dynamic: Option<DynamicAttention>,
    adaptive: Option<ParamId>,
    fuse: Conv,
}

#[derive(Clone, Copy, Debug)]
struct Tail {
    up: Conv,
    att: Conv,
    out: Conv,
}

/// The attention-in-attention network.
///
/// Parameters are registered, and therefore iterated, in this order:
/// `head`, then for every block `na`, `attn.conv1`, `attn.conv2`,
/// `attn.gate`, `da.fc1`, `da.fc2`, `adaptive`, `fuse` (whichever exist),
/// then `tail.up`, `tail.att`, `tail.out`. Each conv or linear layer
/// registers its weight before its bias.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    head: Conv,
    blocks: Vec<Block>,
    tail: Tail,
}

struct Builder<'a> {
    params: ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    /// Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero when no
    /// RNG is supplied.
    fn weight(&mut self, name: String, shape: Shape) -> Result<ParamId> {
        let fan_in = shape.0[1] * shape.0[2] * shape.0[3];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)),
            None => Tensor::zeros(shape),
        };
        self.params.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: Shape) -> Result<ParamId> {
        self.params.add(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, prefix: &str, in_c: usize, out_c: usize, k: usize) -> Result<Conv> {
        Ok(Conv {
            weight: self.weight(format!("{prefix}.weight"), Shape::new(out_c, in_c, k, k))?,
            bias: self.zeros(format!("{prefix}.bias"), Shape::new(1, out_c, 1, 1))?,
            padding: (k - 1) / 2,
        })
    }
}

impl Model {
    /// Freshly initialised model. Conv and linear weights are fan-in scaled
    /// uniform, biases are zero, and the last layer of every dynamic
    /// attention module is zero so that training starts from equal branch
    /// weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::build(config, Some(&mut rng))
    }

    /// Model with every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Model::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
        };
        let head = b.conv("head", 3, c, 3)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let p = format!("blocks.{i}");
            let fusion = config.fusion;
            let non_attention = if fusion.has_non_attention_branch() {
                Some(b.conv(&format!("{p}.na"), c, c, config.non_attn_kernel)?)
            } else {
                None
            };
            let attention = if fusion.has_attention_branch() {
                let conv1 = b.conv(&format!("{p}.attn.conv1"), c, c, 3)?;
                let conv2 = b.conv(&format!("{p}.attn.conv2"), c, c, 3)?;
                let gate = if config.attention_enabled.enabled(i) {
                    Some(b.conv(&format!("{p}.attn.gate"), c, c, 1)?)
                } else {
                    None
                };
                Some(AttentionBranch { conv1, conv2, gate })
            } else {
                None
            };
            let dynamic = if fusion == Fusion::A2 {
                let hidden = config.bottleneck();
                Some(DynamicAttention {
                    fc1_weight: b.weight(format!("{p}.da.fc1.weight"), Shape::new(hidden, c, 1, 1))?,
                    fc1_bias: b.zeros(format!("{p}.da.fc1.bias"), Shape::new(1, hidden, 1, 1))?,
                    fc2_weight: b.zeros(format!("{p}.da.fc2.weight"), Shape::new(2, hidden, 1, 1))?,
                    fc2_bias: b.zeros(format!("{p}.da.fc2.bias"), Shape::new(1, 2, 1, 1))?,
                })
            } else {
                None
            };
            let adaptive = if fusion == Fusion::AdaptiveWeights {
                let init = if b.rng.is_some() { 0.5 } else { 0.0 };
                Some(b.params.add(
                    format!("{p}.adaptive.weight"),
                    Tensor::full(Shape::new(1, 2, 1, 1), init),
                )?)
            } else {
                None
            };
            let fuse_in = if fusion == Fusion::Concatenation { 2 * c } else { c };
            let fuse = b.conv(&format!("{p}.fuse"), fuse_in, c, 1)?;
            blocks.push(Block {
                non_attention,
                attention,
                dynamic,
                adaptive,
                fuse,
            });
        }
        let cu = config.upsample_channels;
        let tail = Tail {
            up: b.conv("tail.up", c, cu, 3)?,
            att: b.conv("tail.att", cu, cu, 1)?,
            out: b.conv("tail.out", cu, 3, 3)?,
        };
        Ok(Model {
            config,
            params: b.params,
            head,
            blocks,
            tail,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Replaces the attention-logit override (ablation switch).
    pub fn set_attn_logit_override(&mut self, value: Option<f64>) {
        self.config.attn_logit_override = value;
    }

    fn conv(&self, g: &mut Graph, x: Var, conv: Conv) -> Result<Var> {
        let w = g.param(&self.params, conv.weight)?;
        let b = g.param(&self.params, conv.bias)?;
        g.conv2d(x, w, Some(b), conv.padding)
    }

    fn block(&self, i: usize) -> Result<&Block> {
        self.blocks
            .get(i)
            .ok_or_else(|| Error::Argument(format!("block {i} out of range")))
    }

    /// `x0 = conv3x3(I_LR)`.
    pub fn shallow_extract(&self, g: &mut Graph, lr: Var) -> Result<Var> {
        if g.shape(lr).channels() != 3 {
            return Err(Error::dim(
                "shallow_extract",
                format!("expected 3 input channels, got {}", g.shape(lr)),
            ));
        }
        self.conv(g, lr, self.head)
    }

    /// Non-attention branch: one conv (3x3 or 1x1) followed by ReLU.
    pub fn non_attention_branch(&self, g: &mut Graph, block: usize, x: Var) -> Result<Var> {
        let conv = self.block(block)?.non_attention.ok_or_else(|| {
            Error::Argument(format!("block {block} has no non-attention branch"))
        })?;
        let y = self.conv(g, x, conv)?;
        g.relu(y)
    }

    /// Attention branch: `conv3x3 -> ReLU -> conv3x3`, gated elementwise by
    /// `sigmoid(conv1x1(x))`. Returns the gated output and the map (absent
    /// when the generator was removed, in which case the gate is identity).
    pub fn attention_branch(&self, g: &mut Graph, block: usize, x: Var) -> Result<(Var, Option<Var>)> {
        let branch = self
            .block(block)?
            .attention
            .ok_or_else(|| Error::Argument(format!("block {block} has no attention branch")))?;
        let f = self.conv(g, x, branch.conv1)?;
        let f = g.relu(f)?;
        let f = self.conv(g, f, branch.conv2)?;
        match branch.gate {
            Some(gate) => {
                let logits = self.conv(g, x, gate)?;
                let map = g.sigmoid(logits)?;
                Ok((g.mul(f, map)?, Some(map)))
            }
            None => Ok((f, None)),
        }
    }

    /// `GAP -> linear(C, C/r) -> ReLU -> linear(C/r, 2) -> softmax`, giving a
    /// `(B, 2, 1, 1)` tensor whose channel 0 is the non-attention weight and
    /// channel 1 the attention weight.
    pub fn dynamic_attention(&self, g: &mut Graph, block: usize, x: Var) -> Result<Var> {
        let da = self
            .block(block)?
            .dynamic
            .ok_or_else(|| Error::Argument(format!("block {block} has no dynamic attention")))?;
        let pooled = g.global_avg_pool(x)?;
        let w1 = g.param(&self.params, da.fc1_weight)?;
        let b1 = g.param(&self.params, da.fc1_bias)?;
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.relu(h)?;
        let w2 = g.param(&self.params, da.fc2_weight)?;
        let b2 = g.param(&self.params, da.fc2_bias)?;
        let mut logits = g.linear(h, w2, Some(b2))?;
        if let Some(forced) = self.config.attn_logit_override {
            let batch = g.shape(logits).batch();
            let na = g.select_channel(logits, 0)?;
            let attn = g.constant(Tensor::full(Shape::new(batch, 1, 1, 1), forced))?;
            logits = g.concat_channels(na, attn)?;
        }
        g.softmax_channels(logits)
    }

    /// Combines the branch outputs according to the configured fusion mode
    /// (before the 1x1 fusion conv). `pi` is required for [`Fusion::A2`].
    pub fn fuse_branches(
        &self,
        g: &mut Graph,
        block: usize,
        x_na: Option<Var>,
        x_attn: Option<Var>,
        pi: Option<Var>,
    ) -> Result<Var> {
        let need = |v: Option<Var>, what: &str| {
            v.ok_or_else(|| Error::Argument(format!("{} fusion needs {what}", self.config.fusion)))
        };
        match self.config.fusion {
            Fusion::A2 => {
                let pi = need(pi, "dynamic weights")?;
                let (na, attn) = (need(x_na, "x_na")?, need(x_attn, "x_attn")?);
                let pi_na = g.select_channel(pi, 0)?;
                let pi_attn = g.select_channel(pi, 1)?;
                let a = g.mul(na, pi_na)?;
                let b = g.mul(attn, pi_attn)?;
                g.add(a, b)
            }
            Fusion::Addition => {
                let (na, attn) = (need(x_na, "x_na")?, need(x_attn, "x_attn")?);
                g.add(na, attn)
            }
            Fusion::Concatenation => {
                let (na, attn) = (need(x_na, "x_na")?, need(x_attn, "x_attn")?);
                g.concat_channels(na, attn)
            }
            Fusion::AdaptiveWeights => {
                let (na, attn) = (need(x_na, "x_na")?, need(x_attn, "x_attn")?);
                let id = self.block(block)?.adaptive.expect("adaptive weights registered");
                let w = g.param(&self.params, id)?;
                let w_na = g.select_channel(w, 0)?;
                let w_attn = g.select_channel(w, 1)?;
                let a = g.mul(na, w_na)?;
                let b = g.mul(attn, w_attn)?;
                g.add(a, b)
            }
            Fusion::AttnOnly => need(x_attn, "x_attn"),
            Fusion::NonAttnOnly => need(x_na, "x_na"),
        }
    }

    /// One block: both branches, their fusion, a 1x1 conv and the identity
    /// skip.
    pub fn block_forward(
        &self,
        g: &mut Graph,
        block: usize,
        x: Var,
        trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<Var> {
        let spec = *self.block(block)?;
        let x_na = match spec.non_attention {
            Some(_) => Some(self.non_attention_branch(g, block, x)?),
            None => None,
        };
        let (x_attn, map) = match spec.attention {
            Some(_) => {
                let (y, m) = self.attention_branch(g, block, x)?;
                (Some(y), m)
            }
            None => (None, None),
        };
        let pi = match spec.dynamic {
            Some(_) => Some(self.dynamic_attention(g, block, x)?),
            None => None,
        };
        let mixed = self.fuse_branches(g, block, x_na, x_attn, pi)?;
        let fused = self.conv(g, mixed, spec.fuse)?;
        let out = g.add(fused, x)?;

        if let Some(traces) = trace {
            let weights = match pi {
                Some(pi) => g
                    .value(pi)
                    .data()
                    .chunks(2)
                    .map(|w| DynamicWeights {
                        pi_na: w[0],
                        pi_attn: w[1],
                    })
                    .collect(),
                None => Vec::new(),
            };
            traces.push(BlockTrace {
                block_index: block,
                weights,
                attention_map: map.map(|m| g.value(m).clone()),
                input_feature: g.value(x).clone(),
                output_feature: g.value(out).clone(),
            });
        }
        Ok(out)
    }

    /// `nearest upsample -> conv3x3 -> (conv1x1 -> sigmoid) gate -> conv3x3`.
    pub fn reconstruct(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let up = g.nearest_upsample(x, self.config.scale)?;
        let a = self.conv(g, up, self.tail.up)?;
        let logits = self.conv(g, a, self.tail.att)?;
        let m = g.sigmoid(logits)?;
        let gated = g.mul(a, m)?;
        self.conv(g, gated, self.tail.out)
    }

    /// Interpolated copy of the LR input used by the global skip.
    pub fn upsample_input(&self, lr: &Tensor) -> Result<Tensor> {
        match self.config.skip_interp {
            SkipInterp::Bilinear => ops::bilinear_upsample(lr, self.config.scale),
            SkipInterp::Nearest => ops::nearest_upsample(lr, self.config.scale),
        }
    }

    /// `I_SR = reconstruct(blocks(shallow_extract(I_LR))) + upsample(I_LR)`.
    /// The output is not clamped.
    pub fn forward(
        &self,
        g: &mut Graph,
        lr: Var,
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<Var> {
        let mut x = self.shallow_extract(g, lr)?;
        for i in 0..self.blocks.len() {
            x = self.block_forward(g, i, x, trace.as_deref_mut())?;
        }
        let rec = self.reconstruct(g, x)?;
        let skip = self.upsample_input(g.value(lr))?;
        let skip = g.constant(skip)?;
        g.add(rec, skip)
    }

    /// Forward pass on a plain tensor.
    pub fn predict(&self, lr: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(lr.clone())?;
        let y = self.forward(&mut g, x, None)?;
        Ok(g.value(y).clone())
    }

    /// Forward pass that also returns every block's trace.
    pub fn predict_traced(&self, lr: &Tensor) -> Result<(Tensor, Vec<BlockTrace>)> {
        let mut g = Graph::new();
        let x = g.constant(lr.clone())?;
        let mut traces = Vec::new();
        let y = self.forward(&mut g, x, Some(&mut traces))?;
        Ok((g.value(y).clone(), traces))
    }

    /// Dynamic weights of `block` for input feature `x`, per sample.
    pub fn branch_weights(&self, block: usize, x: &Tensor) -> Result<Vec<DynamicWeights>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let pi = self.dynamic_attention(&mut g, block, xv)?;
        Ok(g
            .value(pi)
            .data()
            .chunks(2)
            .map(|w| DynamicWeights {
                pi_na: w[0],
                pi_attn: w[1],
            })
            .collect())
    }

    /// Names of the parameters that belong to attention branches.
    pub fn attention_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.contains(".attn."))
            .map(str::to_string)
            .collect()
    }
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let c = config.channels;
    let mut total = conv(3, c, 3);
    for i in 0..config.n_blocks {
        let f = config.fusion;
        if f.has_non_attention_branch() {
            total += conv(c, c, config.non_attn_kernel);
        }
        if f.has_attention_branch() {
            total += 2 * conv(c, c, 3);
            if config.attention_enabled.enabled(i) {
                total += conv(c, c, 1);
            }
        }
        if f == Fusion::A2 {
            let h = config.bottleneck();
            total += (c * h + h) + (h * 2 + 2);
        }
        if f == Fusion::AdaptiveWeights {
            total += 2;
        }
        let fuse_in = if f == Fusion::Concatenation { 2 * c } else { c };
        total += conv(fuse_in, c, 1);
    }
    let cu = config.upsample_channels;
    total + conv(c, cu, 3) + conv(cu, cu, 1) + conv(cu, 3, 3)
}

/// The ten-block residual attention probe network.
pub fn build_probe_model(
    enabled: super::BlockMask,
    channels: usize,
    scale: usize,
    seed: u64,
) -> Result<Model> {
    Model::new(ModelConfig::probe(enabled, channels, scale), seed)
}
