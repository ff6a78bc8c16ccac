use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_and_grads, LossKind};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::tensor::{grad_check, ops, GradCheckOptions, GradCheckReport, Shape, Tensor};

/// Compares the model's backward pass with central differences of the
/// training loss over the flattened parameters.
pub fn model_grad_check(
    model: &Model,
    lr: &Tensor,
    hr: &Tensor,
    loss: LossKind,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut work = model.clone();
    loss_and_grads(&mut work, lr, hr, loss)?;
    let theta = work.params().flatten();
    let analytic = work.params().flatten_grads();
    let objective = |p: &[f64]| -> Result<f64> {
        work.params_mut().assign_flat(p)?;
        let sr = work.predict(lr)?;
        match loss {
            LossKind::L1 => ops::l1_loss(&sr, hr),
            LossKind::L2 => ops::l2_loss(&sr, hr),
        }
    };
    grad_check(&theta, &analytic, objective, opts)
}

/// A small randomised model with a batch whose targets sit above the
/// prediction everywhere, so no L1 residual is near its kink. Every layer,
/// including the zero-initialised ones, gets random values.
pub fn grad_check_fixture(config: ModelConfig, seed: u64) -> Result<(Model, Tensor, Tensor)> {
    let mut model = Model::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with("bias") || p.name.contains(".da.fc2.") || p.name.contains("adaptive") {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let s = model.config().scale;
    let lr = Tensor::from_fn(Shape::new(2, 3, 5, 6), |_| rng.gen_range(0.0..1.0));
    let pred = model.predict(&lr)?;
    // one-signed residuals: random signs would cancel in the mean and leave
    // gradients down at the finite-difference noise floor. Small offsets
    // keep the rounding error of the loss sum small.
    let hr = Tensor::from_fn(Shape::new(2, 3, 5 * s, 6 * s), |idx| {
        pred.at(idx) + rng.gen_range(1e-3..1e-2)
    });
    Ok((model, lr, hr))
}
