use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use a2n_core::analysis::{
    ablation_csv, ablation_table, attention_stats, attention_table_csv, export_heatmaps, fusion_study,
    mask_study, rank_branch_weights, run_ablation, AblationSpec,
};
use a2n_core::imaging::{
    bicubic_resize, crop_to_multiple, list_pngs, load_paired_dir, load_png, save_png, Image, PairedImages,
};
use a2n_core::metrics::{evaluate, evaluate_pairs, interpolation_baseline, EvalReport, EvalRow};
use a2n_core::model::{Model, ModelConfig};
use a2n_core::tensor::GradCheckOptions;
use a2n_core::training::{
    grad_check_fixture, model_grad_check, train as run_training, write_loss_csv, Checkpoint, TrainConfig,
    TrainObserver,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Study};
use crate::CliError;

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let path = value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("'{key}' is not set")))?;
    if !path.is_dir() {
        return Err(CliError::Usage(format!("{key} {} is not a directory", path.display())));
    }
    Ok(path)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    source: String,
    output: String,
}

/// Output path (relative to `out_dir`) to the hashes it was made from.
type Manifest = BTreeMap<String, ManifestEntry>;

const MANIFEST: &str = "prepare_manifest.json";

pub fn prepare(cfg: &RunConfig) -> Result<(), CliError> {
    let hr_dir = required(&cfg.prepare.hr_dir, "prepare.hr_dir")?;
    let scale = cfg.model.scale;
    if scale < 2 {
        return Err(CliError::Config(format!("scale must be at least 2, got {scale}")));
    }
    let sources = list_pngs(hr_dir)?;
    if sources.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", hr_dir.display())));
    }
    let out = &cfg.out_dir;
    let out_hr = out.join("HR");
    let copy_hr = match (hr_dir.canonicalize(), out_hr.canonicalize()) {
        (Ok(a), Ok(b)) => a != b,
        _ => true,
    };
    let manifest_path = out.join(MANIFEST);
    let old: Manifest = match std::fs::read(&manifest_path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => Manifest::new(),
    };
    let mut manifest = Manifest::new();
    let (mut written, mut fresh) = (0usize, 0usize);
    for src in &sources {
        let file = src.file_name().unwrap().to_string_lossy().into_owned();
        let source = sha256_file(src)?;
        let mut targets = vec![format!("LRx{scale}/{file}")];
        if copy_hr {
            targets.push(format!("HR/{file}"));
        }
        for rel in targets {
            let dest = out.join(&rel);
            let up_to_date = old.get(&rel).is_some_and(|e| {
                e.source == source && dest.is_file() && sha256_file(&dest).is_ok_and(|h| h == e.output)
            });
            if up_to_date {
                fresh += 1;
                manifest.insert(rel.clone(), old[&rel].clone());
                continue;
            }
            if rel.starts_with("HR/") {
                std::fs::create_dir_all(&out_hr).map_err(|e| CliError::io(&out_hr, e))?;
                std::fs::copy(src, &dest).map_err(|e| CliError::io(&dest, e))?;
            } else {
                let hr = crop_to_multiple(&load_png(src)?, scale)?;
                let lr = bicubic_resize(&hr, hr.width() / scale, hr.height() / scale)?;
                if let Some(parent) = dest.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
                }
                save_png(&lr, &dest)?;
            }
            written += 1;
            let output = sha256_file(&dest)?;
            manifest.insert(rel, ManifestEntry { source: source.clone(), output });
        }
    }
    if manifest != old {
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write(&manifest_path, text)?;
    }
    println!("prepare: {written} written, {fresh} up to date ({} images, x{scale})", sources.len());
    Ok(())
}

fn load_pairs(dir: &Path, scale: usize, what: &str) -> Result<Vec<PairedImages>, CliError> {
    let set = load_paired_dir(dir, scale, true)?;
    if set.pairs.is_empty() {
        return Err(CliError::Usage(format!("no {what} images in {}/HR", dir.display())));
    }
    Ok(set.pairs)
}

/// Writes `checkpoints/step_NNNNNN.ckpt` for every checkpoint the loop asks for.
struct CheckpointWriter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, step: usize, model: &Model, config: &TrainConfig) -> a2n_core::Result<()> {
        let path = self.dir.join(format!("step_{step:06}.ckpt"));
        Checkpoint::from_model(model, config, step as u64).save(&path)?;
        self.written.push(path);
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let train_dir = required(&cfg.train_dir, "train_dir")?;
    let pairs = load_pairs(train_dir, cfg.model.scale, "training")?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    info!("training {} parameters on {} images", model.param_count(), pairs.len());
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let mut writer = CheckpointWriter {
        dir: ckpt_dir,
        written: Vec::new(),
    };
    let curve = run_training(&mut model, &pairs, &cfg.train, &mut writer)?;
    write_loss_csv(&cfg.out_dir.join("loss.csv"), &curve)?;
    let final_path = cfg.out_dir.join("model.ckpt");
    Checkpoint::from_model(&model, &cfg.train, cfg.train.steps as u64).save(&final_path)?;
    match curve.last() {
        Some(p) => println!("train: {} steps, final loss {:.6}", p.step, p.loss),
        None => println!("train: 0 steps, model left at its initialisation"),
    }
    println!("checkpoint: {} ({} intermediate)", final_path.display(), writer.written.len());
    if let Some(val) = &cfg.val_dir {
        let report = score(&model, val, cfg.model.scale)?;
        write(&cfg.out_dir.join("eval.csv"), report.to_csv())?;
        print!("{}", report.to_table());
    }
    Ok(())
}

/// [`evaluate`], or, when `<dir>/LRx{scale}` does not exist, the same
/// report over bicubic LR images made on the fly.
fn score(model: &Model, dir: &Path, scale: usize) -> Result<EvalReport, CliError> {
    if dir.join(format!("LRx{scale}")).is_dir() {
        return Ok(evaluate(model, dir, scale)?);
    }
    warn!("{}/LRx{scale} not found, downsampling HR images", dir.display());
    let pairs = load_paired_dir(dir, scale, true)?.pairs;
    Ok(EvalReport {
        dataset: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        scale,
        border: scale,
        rows: evaluate_pairs(model, &pairs)?,
        missing: Vec::new(),
    })
}

fn eval_pairs(dir: &Path, scale: usize) -> Result<Vec<PairedImages>, CliError> {
    let synthesize = !dir.join(format!("LRx{scale}")).is_dir();
    Ok(load_paired_dir(dir, scale, synthesize)?.pairs)
}

/// Builds a model with the configured architecture and fills it from the
/// checkpoint; a differing architecture is a config error.
fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = cfg.checkpoint_path();
    let ckpt = Checkpoint::load(&path)?;
    let mut model = Model::zeros(cfg.model.clone())?;
    ckpt.load_into(&mut model)?;
    info!("loaded {} (step {})", path.display(), ckpt.step);
    Ok(model)
}

fn mean(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let val = required(&cfg.val_dir, "val_dir")?;
    let model = load_model(cfg)?;
    let scale = cfg.model.scale;
    let report = score(&model, val, scale)?;
    if report.is_empty() {
        return Err(CliError::Usage(format!("no evaluable image pairs in {}", val.display())));
    }
    write(&cfg.out_dir.join("eval.csv"), report.to_csv())?;
    write(&cfg.out_dir.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;

    // baselines on the same pairs the model was scored on
    let pairs: Vec<PairedImages> = eval_pairs(val, scale)?
        .into_iter()
        .filter(|p| report.rows.iter().any(|r| r.file == p.name))
        .collect();
    let bicubic = interpolation_baseline(&pairs, |img, w, h| bicubic_resize(img, w, h))?;
    let skip = interpolation_baseline(&pairs, |img, _, _| {
        Ok(Image::from_tensor(&model.upsample_input(&img.to_rgb().to_tensor())?, 0)?)
    })?;
    let mut csv = String::from("file,method,psnr_db,ssim\n");
    for (method, rows) in [("bicubic", &bicubic), ("skip", &skip)] {
        for r in rows.iter() {
            let _ = writeln!(csv, "{},{method},{:.6},{:.6}", r.file, r.psnr_db, r.ssim);
        }
    }
    write(&cfg.out_dir.join("baseline.csv"), csv)?;

    print!("{}", report.to_table());
    println!(
        "mean: model {:.4} dB / {:.4}, bicubic {:.4} dB / {:.4}, skip-only {:.4} dB / {:.4}",
        report.mean_psnr(),
        report.mean_ssim(),
        mean(&bicubic, |r| r.psnr_db),
        mean(&bicubic, |r| r.ssim),
        mean(&skip, |r| r.psnr_db),
        mean(&skip, |r| r.ssim),
    );
    if !report.missing.is_empty() {
        println!("missing: {}", report.missing.join(", "));
    }
    Ok(())
}

pub fn analyze(cfg: &RunConfig) -> Result<(), CliError> {
    let val = required(&cfg.val_dir, "val_dir")?;
    let model = load_model(cfg)?;
    let images: Vec<Image> = load_pairs(val, cfg.model.scale, "analysis")?
        .into_iter()
        .take(cfg.analyze.max_images.max(1))
        .map(|p| p.lr)
        .collect();
    let out = &cfg.out_dir;
    let records = attention_stats(&model, &images)?;
    let table = attention_table_csv(&records);
    write(&out.join("attention_table.csv"), &table)?;
    write(&out.join("records.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    let heatmaps = if records.is_empty() {
        0
    } else {
        export_heatmaps(&records, &out.join("heatmaps"))?.len()
    };
    let ranking = rank_branch_weights(&model, &images, cfg.analyze.k)?;
    let exported = ranking.export(&out.join("ranking"))?;
    print!("{table}");
    println!(
        "analyze: {} images, {} blocks, {heatmaps} heatmaps, {} ranked captures",
        images.len(),
        records.len(),
        ranking.top.len() + ranking.bottom.len()
    );
    info!("ranking files: {}", exported.len());
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let train_dir = required(&cfg.train_dir, "train_dir")?;
    let val = required(&cfg.val_dir, "val_dir")?;
    let variants = match cfg.ablate.study {
        Study::Fusion => fusion_study(),
        Study::Mask => mask_study(),
        Study::Custom => cfg.ablate.variants.clone(),
    };
    if variants.is_empty() {
        return Err(CliError::Config("ablate.variants is empty".into()));
    }
    let scale = cfg.model.scale;
    let train_pairs = load_pairs(train_dir, scale, "training")?;
    let val_pairs = load_pairs(val, scale, "validation")?;
    let spec = AblationSpec {
        base: cfg.model.clone(),
        variants,
        seed: cfg.seed,
        train: cfg.train.clone(),
    };
    let rows = run_ablation(&spec, &train_pairs, &val_pairs, &mut |_, _| Ok(()));
    write(&cfg.out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    write(&cfg.out_dir.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    print!("{}", ablation_table(&rows));
    if rows.iter().all(|r| !r.ok()) {
        return Err(CliError::Usage("every ablation variant failed".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    config: ModelConfig,
    eps: f64,
    threshold: f64,
    max_rel_error: f64,
    worst_coord: Option<usize>,
    checked: usize,
    skipped_kinks: usize,
    passed: bool,
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let model_cfg = ModelConfig::desk(g.n_blocks, g.channels, g.scale);
    let (model, lr, hr) = grad_check_fixture(model_cfg.clone(), cfg.seed)?;
    let opts = GradCheckOptions {
        eps: g.eps,
        max_coords: g.max_coords,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let start = std::time::Instant::now();
    let report = model_grad_check(&model, &lr, &hr, cfg.train.loss, &opts)?;
    let passed = report.max_rel_error < g.threshold;
    let summary = GradcheckSummary {
        config: model_cfg,
        eps: g.eps,
        threshold: g.threshold,
        max_rel_error: report.max_rel_error,
        worst_coord: report.worst_coord,
        checked: report.checked,
        skipped_kinks: report.skipped_kinks,
        passed,
    };
    write(&cfg.out_dir.join("gradcheck.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "max relative error: {:.3e} over {} parameters ({} skipped at kinks, {:.1}s)",
        report.max_rel_error,
        report.checked,
        report.skipped_kinks,
        start.elapsed().as_secs_f64()
    );
    if !passed {
        return Err(CliError::Verification(format!(
            "max relative error {:.3e} is not below {:e}",
            report.max_rel_error, g.threshold
        )));
    }
    Ok(())
}
