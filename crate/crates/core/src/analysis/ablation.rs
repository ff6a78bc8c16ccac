use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::PairedImages;
use crate::metrics::evaluate_pairs;
use crate::model::{param_count, BlockMask, Fusion, Model, ModelConfig};
use crate::training::{train, TrainConfig};

/// One change applied to the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Which blocks keep their attention generator.
    Mask(BlockMask),
    Fusion(Fusion),
    /// Constant attention-branch logit in every dynamic attention module.
    LogitOverride(f64),
}

impl AblationVariant {
    pub fn label(&self) -> String {
        match self {
            AblationVariant::Mask(m) => m.label(),
            AblationVariant::Fusion(f) => f.name().to_string(),
            AblationVariant::LogitOverride(v) => format!("A2 attn logit {v}"),
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Mask(m) => cfg.attention_enabled = m.clone(),
            AblationVariant::Fusion(f) => cfg.fusion = *f,
            AblationVariant::LogitOverride(v) => {
                if cfg.fusion != Fusion::A2 {
                    return Err(Error::Config(format!(
                        "a logit override needs A2 fusion, base uses {}",
                        cfg.fusion
                    )));
                }
                cfg.attn_logit_override = Some(*v);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The attention-layer masks of the probe study.
pub fn mask_study() -> Vec<AblationVariant> {
    [
        BlockMask::All,
        BlockMask::None,
        BlockMask::blocks(1..=5),
        BlockMask::blocks(6..=10),
        BlockMask::blocks([2, 4, 6, 8, 10]),
    ]
    .into_iter()
    .map(AblationVariant::Mask)
    .collect()
}

/// All fusion modes.
pub fn fusion_study() -> Vec<AblationVariant> {
    Fusion::ALL.into_iter().map(AblationVariant::Fusion).collect()
}

/// Published full-scale result for a variant (Set14 x4).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PublishedReference {
    pub params_k: f64,
    pub psnr_db: f64,
}

pub fn published_reference(variant: &AblationVariant, base: &ModelConfig) -> Option<PublishedReference> {
    let r = |params_k, psnr_db| Some(PublishedReference { params_k, psnr_db });
    match variant {
        AblationVariant::Mask(m) => match m {
            BlockMask::All => r(9200.0, 28.65),
            BlockMask::None => r(4400.0, 28.60),
            BlockMask::Blocks(set) => {
                let v: Vec<usize> = set.iter().copied().collect();
                if v == [1, 2, 3, 4, 5] {
                    r(6800.0, 28.60)
                } else if v == [6, 7, 8, 9, 10] {
                    r(6800.0, 28.65)
                } else if v == [2, 4, 6, 8, 10] {
                    r(6800.0, 28.63)
                } else {
                    None
                }
            }
        },
        AblationVariant::Fusion(f) => match f {
            Fusion::NonAttnOnly => r(208.0, 28.515),
            Fusion::AttnOnly => r(810.0, 28.646),
            Fusion::Addition => r(1040.0, 28.651),
            Fusion::Concatenation => r(1092.0, 28.642),
            Fusion::AdaptiveWeights => r(1040.0, 28.648),
            Fusion::A2 if base.non_attn_kernel == 1 => r(843.0, 28.695),
            Fusion::A2 => r(1047.0, 28.707),
        },
        AblationVariant::LogitOverride(_) => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub base: ModelConfig,
    pub variants: Vec<AblationVariant>,
    /// Initialisation seed shared by every variant.
    pub seed: u64,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: AblationVariant,
    pub params: Option<usize>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub final_loss: Option<f64>,
    pub published: Option<PublishedReference>,
    /// `ok` or `failed: <reason>`.
    pub status: String,
}

impl AblationRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Trains and evaluates every variant with the same seeds. A failing
/// variant becomes a `failed` row and the remaining ones still run.
/// `on_model` sees each trained model.
pub fn run_ablation(
    spec: &AblationSpec,
    train_data: &[PairedImages],
    eval_data: &[PairedImages],
    on_model: &mut dyn FnMut(&AblationVariant, &Model) -> Result<()>,
) -> Vec<AblationRow> {
    spec.variants
        .iter()
        .map(|variant| {
            let mut row = AblationRow {
                label: variant.label(),
                variant: variant.clone(),
                params: None,
                psnr_db: None,
                ssim: None,
                final_loss: None,
                published: published_reference(variant, &spec.base),
                status: "ok".into(),
            };
            let mut run = || -> Result<()> {
                let cfg = variant.apply(&spec.base)?;
                row.params = Some(param_count(&cfg));
                let mut model = Model::new(cfg, spec.seed)?;
                info!("ablation {}: {} parameters", row.label, model.param_count());
                let curve = train(&mut model, train_data, &spec.train, &mut ())?;
                row.final_loss = curve.last().map(|p| p.loss);
                let rows = evaluate_pairs(&model, eval_data)?;
                if rows.is_empty() {
                    return Err(Error::Usage("no evaluation images".into()));
                }
                let n = rows.len() as f64;
                row.psnr_db = Some(rows.iter().map(|r| r.psnr_db).sum::<f64>() / n);
                row.ssim = Some(rows.iter().map(|r| r.ssim).sum::<f64>() / n);
                on_model(variant, &model)
            };
            if let Err(e) = run() {
                warn!("ablation {} failed: {e}", row.label);
                row.status = format!("failed: {e}");
            }
            row
        })
        .collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

/// `config,params,psnr_db,ssim,published_params_k,published_psnr_db,status`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,params,psnr_db,ssim,published_params_k,published_psnr_db,status\n");
    for r in rows {
        let _ = writeln!(
            out,
            "\"{}\",{},{},{},{},{},{}",
            r.label,
            r.params.map(|p| p.to_string()).unwrap_or_default(),
            opt(r.psnr_db, 4),
            opt(r.ssim, 4),
            opt(r.published.map(|p| p.params_k), 0),
            opt(r.published.map(|p| p.psnr_db), 3),
            r.status.replace(',', ";")
        );
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<w$}  {:>9}  {:>8}  {:>7}  {:>10}  {:>10}  status\n",
        "config", "params", "PSNR", "SSIM", "pub. (K)", "pub. PSNR"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<w$}  {:>9}  {:>8}  {:>7}  {:>10}  {:>10}  {}",
            r.label,
            r.params.map(|p| p.to_string()).unwrap_or_default(),
            opt(r.psnr_db, 3),
            opt(r.ssim, 4),
            opt(r.published.map(|p| p.params_k), 0),
            opt(r.published.map(|p| p.psnr_db), 3),
            r.status
        );
    }
    out
}
