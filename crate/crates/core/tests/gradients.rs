use std::time::Instant;

use a2n_core::model::{BlockMask, Fusion, Model, ModelConfig, SkipInterp};
use a2n_core::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Shape, Tensor, Var};
use a2n_core::training::{grad_check_fixture, model_grad_check, LossKind};
use a2n_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Gradient check of `sum(build(inputs) * w)` for a fixed random `w`.
fn check_op<F>(inputs: Vec<Tensor>, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
    let y = build(&mut g, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random(g.shape(y), &mut rng);
    let wv = g.constant(w.clone()).unwrap();
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&inputs)
        .flat_map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    let objective = |p: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let mut offset = 0;
        let mut vars = Vec::new();
        for s in &shapes {
            let t = Tensor::new(*s, p[offset..offset + s.numel()].to_vec())?;
            offset += s.numel();
            vars.push(g.constant(t)?);
        }
        let y = build(&mut g, &vars)?;
        Ok(g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    grad_check(&theta, &analytic, objective, &GradCheckOptions::default()).unwrap()
}

fn assert_tight(name: &str, r: GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked {r:?}");
    assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
}

#[test]
fn conv2d_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, pad) in [(3, 1), (1, 0), (3, 0)] {
        let x = random(Shape::new(2, 3, 5, 4), &mut rng);
        let w = random(Shape::new(4, 3, k, k), &mut rng);
        let b = random(Shape::new(1, 4, 1, 1), &mut rng);
        let r = check_op(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), pad));
        assert_tight(&format!("conv k{k} p{pad}"), r);
    }
}

#[test]
fn pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = off_zero(Shape::new(2, 3, 3, 4), &mut rng);
    assert_tight("relu", check_op(vec![x.clone()], |g, v| g.relu(v[0])));
    let x = random(Shape::new(2, 3, 3, 4), &mut rng).map(|v| v * 4.0);
    assert_tight("sigmoid", check_op(vec![x], |g, v| g.sigmoid(v[0])));
}

#[test]
fn softmax_pool_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(Shape::new(3, 2, 1, 1), &mut rng).map(|v| v * 3.0);
    assert_tight("softmax", check_op(vec![x], |g, v| g.softmax_channels(v[0])));
    let x = random(Shape::new(2, 5, 3, 3), &mut rng);
    assert_tight("gap", check_op(vec![x], |g, v| g.global_avg_pool(v[0])));
    let x = random(Shape::new(2, 6, 1, 1), &mut rng);
    let w = random(Shape::new(3, 6, 1, 1), &mut rng);
    let b = random(Shape::new(1, 3, 1, 1), &mut rng);
    assert_tight("linear", check_op(vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2]))));
}

#[test]
fn resampling_and_channel_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(Shape::new(2, 2, 3, 2), &mut rng);
    assert_tight("nearest", check_op(vec![x.clone()], |g, v| g.nearest_upsample(v[0], 3)));
    let y = random(Shape::new(2, 3, 3, 2), &mut rng);
    assert_tight("concat", check_op(vec![x.clone(), y], |g, v| g.concat_channels(v[0], v[1])));
    assert_tight("select", check_op(vec![x], |g, v| g.select_channel(v[0], 1)));
}

#[test]
fn broadcast_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let full = Shape::new(2, 3, 2, 2);
    for small in [full, Shape::new(2, 3, 1, 1), Shape::new(2, 1, 1, 1), Shape::new(1, 1, 1, 1)] {
        let a = random(full, &mut rng);
        let b = random(small, &mut rng);
        assert_tight("add", check_op(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])));
        assert_tight("mul", check_op(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])));
        // operands given small-first are reordered internally
        assert_tight("mul rev", check_op(vec![b, a], |g, v| g.mul(v[0], v[1])));
    }
    let a = random(full, &mut rng);
    let b = random(full, &mut rng);
    assert_tight("scale_add", check_op(vec![a, b], |g, v| g.scale_add(v[0], 0.7, v[1], -1.3)));
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let target = random(Shape::new(2, 3, 4, 4), &mut rng);
    let pred = target.map(|v| v + 0.5);
    let t1 = target.clone();
    assert_tight("l1", check_op(vec![pred.clone()], move |g, v| g.l1_loss(v[0], &t1)));
    assert_tight("l2", check_op(vec![pred], move |g, v| g.l2_loss(v[0], &target)));
}

/// Gradient check of `sum((layer(x) - y0) * w)` over both `x` and every
/// model parameter, where `y0` is the unperturbed output. Subtracting `y0`
/// leaves the outputs a coordinate does not touch at exactly zero, so they
/// add no rounding to the sum. Parameters feeding the branch weights still
/// touch every output, hence the wide step.
fn check_layer<F>(model: &Model, x: Tensor, layer: F) -> GradCheckReport
where
    F: Fn(&Model, &mut Graph, Var) -> Result<Var>,
{
    let mut work = model.clone();
    work.params_mut().zero_grad();
    let mut g = Graph::new();
    let xv = g.variable(x.clone()).unwrap();
    let y = layer(&work, &mut g, xv).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(98);
    let w = random(g.shape(y), &mut rng);
    let wv = g.constant(w.clone()).unwrap();
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    g.accumulate_param_grads(work.params_mut()).unwrap();

    let n = x.numel();
    let mut theta = x.data().to_vec();
    theta.extend(work.params().flatten());
    let mut analytic = match g.grad(xv) {
        Some(gr) => gr.data().to_vec(),
        None => vec![0.0; n],
    };
    analytic.extend(work.params().flatten_grads());
    let shape = x.shape();
    let y0 = g.value(y).clone();
    let objective = |p: &[f64]| -> Result<f64> {
        work.params_mut().assign_flat(&p[n..])?;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(shape, p[..n].to_vec())?)?;
        let y = layer(&work, &mut g, xv)?;
        let d = g.value(y).data().iter().zip(y0.data());
        Ok(d.zip(w.data()).map(|((a, a0), b)| (a - a0) * b).sum())
    };
    grad_check(&theta, &analytic, objective, &wide_step()).unwrap()
}

#[test]
fn every_layer_in_isolation() {
    let (model, _, _) = grad_check_fixture(ModelConfig::desk(2, 8, 2), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let image = Tensor::from_fn(Shape::new(2, 3, 5, 6), |_| rng.gen_range(0.0..1.0));
    let feature = random(Shape::new(2, 8, 5, 6), &mut rng);
    assert_tight("shallow", check_layer(&model, image, |m, g, x| m.shallow_extract(g, x)));
    assert_tight(
        "non-attention",
        check_layer(&model, feature.clone(), |m, g, x| m.non_attention_branch(g, 0, x)),
    );
    assert_tight(
        "attention",
        check_layer(&model, feature.clone(), |m, g, x| Ok(m.attention_branch(g, 0, x)?.0)),
    );
    assert_tight(
        "dynamic",
        check_layer(&model, feature.clone(), |m, g, x| m.dynamic_attention(g, 1, x)),
    );
    assert_tight(
        "block",
        check_layer(&model, feature.clone(), |m, g, x| m.block_forward(g, 1, x, None)),
    );
    assert_tight("reconstruct", check_layer(&model, feature, |m, g, x| m.reconstruct(g, x)));
}

fn model_check(config: ModelConfig, loss: LossKind) -> GradCheckReport {
    let (model, lr, hr) = grad_check_fixture(config, 7).unwrap();
    model_grad_check(&model, &lr, &hr, loss, &GradCheckOptions::default()).unwrap()
}

fn wide_step() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-4,
        five_point: true,
        ..Default::default()
    }
}

/// A few gradients in every variant sit near 5e-9, where rounding in the
/// loss swamps a 1e-5 step. A wider step with the fourth-order stencil keeps
/// them above the noise without the curvature error of a wide central step.
fn variant_check(config: ModelConfig, loss: LossKind) -> GradCheckReport {
    let (model, lr, hr) = grad_check_fixture(config, 7).unwrap();
    let r = model_grad_check(&model, &lr, &hr, loss, &wide_step()).unwrap();
    assert!(r.skipped_kinks * 20 < r.checked, "too many kinks skipped: {r:?}");
    r
}

#[test]
fn full_a2n_every_parameter() {
    let t = Instant::now();
    let r = model_check(ModelConfig::desk(2, 8, 2), LossKind::L1);
    println!("A2N 2x8: {r:?} in {:?}", t.elapsed());
    assert!(r.checked > 1000, "{r:?}");
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn every_fusion_variant() {
    for fusion in Fusion::ALL {
        let mut cfg = ModelConfig::desk(2, 8, 3);
        cfg.fusion = fusion;
        let r = variant_check(cfg, LossKind::L1);
        assert!(r.max_rel_error < 1e-5, "{fusion}: {r:?}");
    }
}

#[test]
fn masks_kernels_skips_and_l2() {
    let mut cfg = ModelConfig::desk(2, 8, 2);
    cfg.non_attn_kernel = 1;
    cfg.attention_enabled = BlockMask::blocks([2]);
    cfg.skip_interp = SkipInterp::Nearest;
    let r = variant_check(cfg.clone(), LossKind::L1);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    let r = variant_check(cfg, LossKind::L2);
    assert!(r.max_rel_error < 1e-5, "{r:?}");

    let mut cfg = ModelConfig::desk(2, 8, 4);
    cfg.attn_logit_override = Some(-3.0);
    let r = variant_check(cfg, LossKind::L1);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}
