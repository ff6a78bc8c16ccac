use a2n_core::imaging::{bicubic_resize, synthetic_scene, PairedImages};
use a2n_core::model::{Model, ModelConfig};
use a2n_core::training::{
    loss_and_grads, train, write_loss_csv, Adam, BatchSampler, Checkpoint, LossKind, TrainConfig,
    TrainObserver,
};
use a2n_core::Error;

fn dataset(n: u64, size: usize) -> Vec<PairedImages> {
    (0..n)
        .map(|i| {
            let hr = synthetic_scene(size, size, i).unwrap();
            let lr = bicubic_resize(&hr, size / 2, size / 2).unwrap();
            PairedImages {
                name: format!("t{i}"),
                hr,
                lr,
                scale: 2,
            }
        })
        .collect()
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch: 2,
        lr_patch: 8,
        steps,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Saved(Vec<(usize, Vec<u8>)>);

impl TrainObserver for Saved {
    fn on_checkpoint(&mut self, step: usize, model: &Model, config: &TrainConfig) -> a2n_core::Result<()> {
        self.0.push((step, Checkpoint::from_model(model, config, step as u64).to_bytes()?));
        Ok(())
    }
}

#[test]
fn overfits_a_single_image() {
    let data = dataset(1, 32);
    let mut model = Model::new(ModelConfig::desk(2, 8, 2), 1).unwrap();
    // the patch is the whole image, so every step sees the same sample
    let cfg = TrainConfig {
        batch: 1,
        lr_patch: 16,
        augment: false,
        ..small_config(200)
    };
    let curve = train(&mut model, &data, &cfg, &mut ()).unwrap();
    assert_eq!(curve.len(), 200);
    // means over consecutive 40-step windows
    let windows: Vec<f64> = curve
        .chunks(40)
        .map(|c| c.iter().map(|p| p.loss).sum::<f64>() / c.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
    assert!(windows[4] < 0.9 * windows[0], "{windows:?}");
}

#[test]
fn fixed_batch_loss_falls_in_most_of_twenty_steps() {
    let data = dataset(2, 32);
    let cfg = TrainConfig {
        lr: 1e-4,
        ..small_config(20)
    };
    let (lr, hr) = BatchSampler::new(&data, &cfg).unwrap().next_batch().unwrap();
    let mut model = Model::new(ModelConfig::desk(2, 8, 2), 2).unwrap();
    let mut adam = Adam::new(model.params());
    let mut losses = Vec::new();
    for _ in 0..20 {
        losses.push(loss_and_grads(&mut model, &lr, &hr, LossKind::L1).unwrap());
        adam.step(model.params_mut(), cfg.lr).unwrap();
    }
    losses.push(loss_and_grads(&mut model, &lr, &hr, LossKind::L1).unwrap());
    let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls >= 16, "{falls} of 20: {losses:?}");
}

fn run(threads: usize, steps: usize) -> (Vec<f64>, Vec<(usize, Vec<u8>)>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let data = dataset(3, 32);
        let mut model = Model::new(ModelConfig::desk(2, 8, 2), 3).unwrap();
        let mut saved = Saved::default();
        let cfg = TrainConfig {
            checkpoint_every: 25,
            batch: 3,
            ..small_config(steps)
        };
        let curve = train(&mut model, &data, &cfg, &mut saved).unwrap();
        (curve.iter().map(|p| p.loss).collect(), saved.0)
    })
}

#[test]
fn runs_are_bit_identical_across_thread_counts() {
    let (loss_a, ckpt_a) = run(1, 100);
    let (loss_b, ckpt_b) = run(1, 100);
    let (loss_c, ckpt_c) = run(4, 100);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&loss_a), bits(&loss_b));
    assert_eq!(bits(&loss_a), bits(&loss_c));
    assert_eq!(ckpt_a.iter().map(|c| c.0).collect::<Vec<_>>(), [25, 50, 75, 100]);
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(ckpt_a, ckpt_c);
}

#[test]
fn zero_steps_keeps_the_initialisation() {
    let data = dataset(1, 32);
    let init = Model::new(ModelConfig::desk(2, 8, 2), 4).unwrap();
    let mut model = init.clone();
    let mut saved = Saved::default();
    let cfg = small_config(0);
    let curve = train(&mut model, &data, &cfg, &mut saved).unwrap();
    assert!(curve.is_empty());
    assert_eq!(saved.0.len(), 1);
    let (step, bytes) = &saved.0[0];
    assert_eq!(*step, 0);
    assert_eq!(bytes, &Checkpoint::from_model(&init, &cfg, 0).to_bytes().unwrap());
}

#[test]
fn checkpoint_files_round_trip() {
    let data = dataset(1, 32);
    let mut model = Model::new(ModelConfig::desk(2, 8, 2), 6).unwrap();
    let cfg = small_config(5);
    train(&mut model, &data, &cfg, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    Checkpoint::from_model(&model, &cfg, 5).save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded.step, 5);
    assert_eq!(loaded.train, cfg);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let restored = loaded.to_model().unwrap();
    for (a, b) in model.params().iter().zip(restored.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor, b.tensor);
    }

    let mut bytes = std::fs::read(&p1).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&p2, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&p2), Err(Error::CorruptCheckpoint(_))));

    let mut other = Model::new(ModelConfig::desk(3, 8, 2), 6).unwrap();
    match loaded.load_into(&mut other) {
        Err(Error::ConfigMismatch { fields }) => assert!(fields.iter().any(|f| f.starts_with("n_blocks"))),
        r => panic!("expected a mismatch, got {r:?}"),
    }
}

#[test]
fn loss_curve_csv() {
    let data = dataset(1, 32);
    let mut model = Model::new(ModelConfig::desk(1, 4, 2), 7).unwrap();
    let cfg = TrainConfig {
        lr_halve_every: Some(2),
        ..small_config(4)
    };
    let curve = train(&mut model, &data, &cfg, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&path, &curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,lr");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(",0.002"));
    assert!(lines[3].ends_with(",0.001"));
}

#[test]
fn empty_dataset_is_a_usage_error() {
    let mut model = Model::new(ModelConfig::desk(1, 4, 2), 7).unwrap();
    assert!(matches!(train(&mut model, &[], &small_config(3), &mut ()), Err(Error::Usage(_))));
}
