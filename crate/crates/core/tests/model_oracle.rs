//! A straight-line re-implementation of the network with plain loops,
//! compared against the graph-based forward pass.

use a2n_core::model::{BlockMask, Fusion, Model, ModelConfig, SkipInterp};
use a2n_core::tensor::{Shape, Tensor};
use a2n_core::training::grad_check_fixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[channel][y][x]` for a single image.
type Map = Vec<Vec<Vec<f64>>>;

fn param<'a>(m: &'a Model, name: &str) -> &'a Tensor {
    let id = m.params().by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.params().tensor(id)
}

fn has(m: &Model, name: &str) -> bool {
    m.params().by_name(name).is_some()
}

fn dims(x: &Map) -> (usize, usize, usize) {
    (x.len(), x[0].len(), x[0][0].len())
}

fn conv(m: &Model, prefix: &str, x: &Map) -> Map {
    let w = param(m, &format!("{prefix}.weight"));
    let b = param(m, &format!("{prefix}.bias"));
    let [oc, ic, k, _] = w.shape().0;
    let pad = (k - 1) / 2;
    let (c, h, wd) = dims(x);
    assert_eq!(c, ic);
    let mut out = vec![vec![vec![0.0; wd]; h]; oc];
    for o in 0..oc {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.at([0, o, 0, 0]);
                for i in 0..ic {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad as isize;
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += w.at([o, i, ky, kx]) * x[i][sy as usize][sx as usize];
                            }
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

fn map(x: &Map, f: impl Fn(f64) -> f64) -> Map {
    x.iter().map(|c| c.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()).collect()
}

fn zip(a: &Map, b: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
    a.iter()
        .zip(b)
        .map(|(ca, cb)| {
            ca.iter()
                .zip(cb)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(&u, &v)| f(u, v)).collect())
                .collect()
        })
        .collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `(pi_na, pi_attn)`.
fn dynamic_weights(m: &Model, p: &str, x: &Map) -> (f64, f64) {
    let (c, h, w) = dims(x);
    let pooled: Vec<f64> = x
        .iter()
        .map(|ch| ch.iter().flatten().sum::<f64>() / (h * w) as f64)
        .collect();
    let w1 = param(m, &format!("{p}.da.fc1.weight"));
    let b1 = param(m, &format!("{p}.da.fc1.bias"));
    let hidden: Vec<f64> = (0..w1.shape().0[0])
        .map(|j| {
            let s: f64 = (0..c).map(|i| w1.at([j, i, 0, 0]) * pooled[i]).sum();
            (s + b1.at([0, j, 0, 0])).max(0.0)
        })
        .collect();
    let w2 = param(m, &format!("{p}.da.fc2.weight"));
    let b2 = param(m, &format!("{p}.da.fc2.bias"));
    let mut logit = [0.0; 2];
    for (o, l) in logit.iter_mut().enumerate() {
        *l = b2.at([0, o, 0, 0]) + (0..hidden.len()).map(|j| w2.at([o, j, 0, 0]) * hidden[j]).sum::<f64>();
    }
    if let Some(forced) = m.config().attn_logit_override {
        logit[1] = forced;
    }
    let (e0, e1) = (logit[0].exp(), logit[1].exp());
    (e0 / (e0 + e1), e1 / (e0 + e1))
}

fn block(m: &Model, i: usize, x: &Map) -> Map {
    let p = format!("blocks.{i}");
    let fusion = m.config().fusion;
    let na = has(m, &format!("{p}.na.weight")).then(|| map(&conv(m, &format!("{p}.na"), x), |v| v.max(0.0)));
    let attn = has(m, &format!("{p}.attn.conv1.weight")).then(|| {
        let f = map(&conv(m, &format!("{p}.attn.conv1"), x), |v| v.max(0.0));
        let f = conv(m, &format!("{p}.attn.conv2"), &f);
        if has(m, &format!("{p}.attn.gate.weight")) {
            let gate = map(&conv(m, &format!("{p}.attn.gate"), x), sigmoid);
            zip(&f, &gate, |a, b| a * b)
        } else {
            f
        }
    });
    let mixed = match fusion {
        Fusion::A2 => {
            let (pn, pa) = dynamic_weights(m, &p, x);
            zip(na.as_ref().unwrap(), attn.as_ref().unwrap(), |a, b| pn * a + pa * b)
        }
        Fusion::Addition => zip(na.as_ref().unwrap(), attn.as_ref().unwrap(), |a, b| a + b),
        Fusion::AdaptiveWeights => {
            let w = param(m, &format!("{p}.adaptive.weight"));
            let (wn, wa) = (w.at([0, 0, 0, 0]), w.at([0, 1, 0, 0]));
            zip(na.as_ref().unwrap(), attn.as_ref().unwrap(), |a, b| wn * a + wa * b)
        }
        Fusion::Concatenation => {
            let mut v = na.unwrap();
            v.extend(attn.unwrap());
            v
        }
        Fusion::AttnOnly => attn.unwrap(),
        Fusion::NonAttnOnly => na.unwrap(),
    };
    let fused = conv(m, &format!("{p}.fuse"), &mixed);
    zip(&fused, x, |a, b| a + b)
}

fn nearest(x: &Map, s: usize) -> Map {
    let (c, h, w) = dims(x);
    (0..c)
        .map(|ch| (0..h * s).map(|y| (0..w * s).map(|xx| x[ch][y / s][xx / s]).collect()).collect())
        .collect()
}

fn bilinear(x: &Map, s: usize) -> Map {
    let (c, h, w) = dims(x);
    let src = |o: usize, n: usize| {
        let t = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = t.floor() as usize;
        (i0, (i0 + 1).min(n - 1), t - i0 as f64)
    };
    (0..c)
        .map(|ch| {
            (0..h * s)
                .map(|y| {
                    let (y0, y1, fy) = src(y, h);
                    (0..w * s)
                        .map(|xx| {
                            let (x0, x1, fx) = src(xx, w);
                            let p = &x[ch];
                            (1.0 - fy) * ((1.0 - fx) * p[y0][x0] + fx * p[y0][x1])
                                + fy * ((1.0 - fx) * p[y1][x0] + fx * p[y1][x1])
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn oracle_forward(m: &Model, lr: &Map) -> Map {
    let mut x = conv(m, "head", lr);
    for i in 0..m.config().n_blocks {
        x = block(m, i, &x);
    }
    let s = m.config().scale;
    let a = conv(m, "tail.up", &nearest(&x, s));
    let gate = map(&conv(m, "tail.att", &a), sigmoid);
    let rec = conv(m, "tail.out", &zip(&a, &gate, |u, v| u * v));
    let skip = match m.config().skip_interp {
        SkipInterp::Bilinear => bilinear(lr, s),
        SkipInterp::Nearest => nearest(lr, s),
    };
    zip(&rec, &skip, |u, v| u + v)
}

fn to_map(t: &Tensor) -> Map {
    let [_, c, h, w] = t.shape().0;
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| t.at([0, ch, y, x])).collect()).collect())
        .collect()
}

fn max_diff(model: &Model, lr: &Tensor) -> f64 {
    let got = to_map(&model.predict(lr).unwrap());
    let want = oracle_forward(model, &to_map(lr));
    let (c, h, w) = dims(&want);
    assert_eq!(dims(&got), (c, h, w));
    let mut worst = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                worst = worst.max((got[ch][y][x] - want[ch][y][x]).abs());
            }
        }
    }
    worst
}

fn input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, 6, 6), |_| rng.gen_range(0.0..1.0))
}

#[test]
fn two_block_forward_matches_straight_line_oracle() {
    let (model, _, _) = grad_check_fixture(ModelConfig::desk(2, 8, 2), 3).unwrap();
    let d = max_diff(&model, &input(1));
    assert!(d < 1e-10, "max deviation {d:e}");
}

#[test]
fn fresh_model_matches_oracle() {
    let model = Model::new(ModelConfig::desk(2, 8, 3), 5).unwrap();
    let d = max_diff(&model, &input(2));
    assert!(d < 1e-10, "max deviation {d:e}");
}

#[test]
fn every_fusion_and_switch_matches_oracle() {
    for fusion in Fusion::ALL {
        let mut cfg = ModelConfig::desk(2, 8, 2);
        cfg.fusion = fusion;
        let (model, _, _) = grad_check_fixture(cfg, 4).unwrap();
        let d = max_diff(&model, &input(3));
        assert!(d < 1e-10, "{fusion}: {d:e}");
    }
    let mut cfg = ModelConfig::desk(3, 4, 4);
    cfg.non_attn_kernel = 1;
    cfg.attention_enabled = BlockMask::blocks([1, 3]);
    cfg.skip_interp = SkipInterp::Nearest;
    cfg.attn_logit_override = Some(-2.5);
    let (model, _, _) = grad_check_fixture(cfg, 6).unwrap();
    let d = max_diff(&model, &input(4));
    assert!(d < 1e-10, "switches: {d:e}");
}

#[test]
fn batch_items_are_independent() {
    let (model, _, _) = grad_check_fixture(ModelConfig::desk(2, 4, 2), 8).unwrap();
    let a = input(10);
    let b = input(11);
    let both = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
    let out = model.predict(&both).unwrap();
    assert_eq!(out.batch_item(0), model.predict(&a).unwrap());
    assert_eq!(out.batch_item(1), model.predict(&b).unwrap());
}
