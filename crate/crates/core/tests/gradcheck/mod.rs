//! Central-difference checks of every differentiable graph op and of a
//! whole micro capsule network. Shared by the `gradients` test target and the
//! acceptance suite; each check panics when its tolerance is exceeded.

use capsid::autodiff::{Graph, Tensor, Var};
use capsid::dsp::FeatureMatrix;
use capsid::models::{build_model, Architecture, GeometryPreset, ModelConfig};
use capsid::Result;
use capsid_oracles::central_difference;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-5;
const SHAPES_PER_OP: u64 = 10;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Values in ±[lo, hi], kept away from zero so kinks are not straddled.
fn away_from_zero(r: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.gen_range(lo..hi);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn tensor(r: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, away_from_zero(r, n, 0.05, 1.0)).unwrap()
}

/// Reduce any output to a scalar with fixed random weights.
fn scalarize(g: &mut Graph, y: Var) -> Result<Var> {
    if g.value(y).len() == 1 {
        return Ok(y);
    }
    let n = g.value(y).len();
    let mut r = rng(n as u64 ^ 0xabcdef);
    let w = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let wy = g.mul_const(y, w)?;
    g.sum(wy)
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, y).unwrap();
    g.value(s).item()
}

/// Normwise relative error `max|a−n| / max(max|n|, floor)`.
fn rel_err_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(floor);
    diff / scale
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    rel_err_floor(analytic, numeric, 1e-8)
}

/// Worst relative error over all inputs.
fn check(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, y).unwrap();
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*v);
        let mut f = |x: &[f64]| {
            let mut probe = inputs.clone();
            probe[k] = Tensor::new(inputs[k].shape(), x.to_vec()).unwrap();
            eval(&probe, build)
        };
        let numeric = central_difference(&mut f, inputs[k].data(), H);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn dims(r: &mut SplitMix64, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| r.gen_range(1..=max)).collect()
}

/// Run `make` for ten seeded shapes and assert the tolerance.
fn suite(name: &str, make: impl Fn(&mut SplitMix64) -> (Vec<Tensor>, Box<Build>)) {
    for case in 0..SHAPES_PER_OP {
        let mut r = rng(case * 7919 + name.len() as u64);
        let (inputs, build) = make(&mut r);
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let e = check(inputs, &*build);
        assert!(e <= OP_TOL, "{name} case {case} shapes {shapes:?}: rel err {e:e}");
    }
}

pub fn elementwise_ops() {
    suite("add", |r| {
        let s = dims(r, 3, 4);
        (vec![tensor(r, &s), tensor(r, &s)], Box::new(|g, v| g.add(v[0], v[1])))
    });
    suite("sub", |r| {
        let s = dims(r, 2, 5);
        (vec![tensor(r, &s), tensor(r, &s)], Box::new(|g, v| g.sub(v[0], v[1])))
    });
    suite("mul", |r| {
        let s = dims(r, 3, 4);
        (vec![tensor(r, &s), tensor(r, &s)], Box::new(|g, v| g.mul(v[0], v[1])))
    });
    suite("scale", |r| {
        let s = dims(r, 2, 6);
        let f = r.gen_range(-3.0..3.0);
        (vec![tensor(r, &s)], Box::new(move |g, v| g.scale(v[0], f)))
    });
    suite("mul_const", |r| {
        let s = dims(r, 2, 6);
        let n: usize = s.iter().product();
        let c: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        (vec![tensor(r, &s)], Box::new(move |g, v| g.mul_const(v[0], c.clone())))
    });
    suite("relu", |r| {
        let s = dims(r, 3, 5);
        (vec![tensor(r, &s)], Box::new(|g, v| g.relu(v[0])))
    });
    suite("sigmoid", |r| {
        let s = dims(r, 2, 6);
        (vec![tensor(r, &s)], Box::new(|g, v| g.sigmoid(v[0])))
    });
}

pub fn shape_and_reduction_ops() {
    suite("reshape", |r| {
        let s = dims(r, 3, 4);
        let flat = s.iter().product::<usize>();
        (vec![tensor(r, &s)], Box::new(move |g, v| g.reshape(v[0], &[flat])))
    });
    suite("permute", |r| {
        let s = dims(r, 4, 3);
        (vec![tensor(r, &s)], Box::new(|g, v| g.permute(v[0], &[2, 0, 3, 1])))
    });
    suite("sum", |r| {
        let s = dims(r, 3, 4);
        (vec![tensor(r, &s)], Box::new(|g, v| g.sum(v[0])))
    });
    suite("mean", |r| {
        let s = dims(r, 3, 4);
        (vec![tensor(r, &s)], Box::new(|g, v| g.mean(v[0])))
    });
    for axis in 0..3 {
        suite("sum_axis", move |r| {
            let s = dims(r, 3, 4);
            (vec![tensor(r, &s)], Box::new(move |g, v| g.sum_axis(v[0], axis)))
        });
        suite("mean_axis", move |r| {
            let s = dims(r, 3, 4);
            (vec![tensor(r, &s)], Box::new(move |g, v| g.mean_axis(v[0], axis)))
        });
        suite("norm_axis", move |r| {
            let s = dims(r, 3, 4);
            (vec![tensor(r, &s)], Box::new(move |g, v| g.norm_axis(v[0], axis)))
        });
        suite("softmax", move |r| {
            let s = dims(r, 3, 4);
            (vec![tensor(r, &s)], Box::new(move |g, v| g.softmax(v[0], axis)))
        });
    }
}

pub fn layer_ops() {
    suite("dense", |r| {
        let (n, i, o) = (r.gen_range(1..5), r.gen_range(1..7), r.gen_range(1..6));
        (
            vec![tensor(r, &[n, i]), tensor(r, &[o, i]), tensor(r, &[o])],
            Box::new(|g, v| g.dense(v[0], v[1], v[2])),
        )
    });
    suite("conv2d", |r| {
        let (n, c, o) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4));
        let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (kh + r.gen_range(0..4), kw + r.gen_range(0..5));
        let stride = (r.gen_range(1..3), r.gen_range(1..3));
        (
            vec![tensor(r, &[n, c, h, w]), tensor(r, &[o, c, kh, kw]), tensor(r, &[o])],
            Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride)),
        )
    });
    suite("maxpool2d", |r| {
        let s = [r.gen_range(1..3), r.gen_range(1..3), r.gen_range(2..6), r.gen_range(2..7)];
        let win = (r.gen_range(1..3), 2);
        (vec![tensor(r, &s)], Box::new(move |g, v| g.maxpool2d(v[0], win)))
    });
    suite("global_avg_pool", |r| {
        let s = dims(r, 4, 4);
        (vec![tensor(r, &s)], Box::new(|g, v| g.global_avg_pool(v[0])))
    });
    suite("batch_norm_train", |r| {
        let (n, c, h, w) = (r.gen_range(2..4), r.gen_range(1..4), r.gen_range(1..3), r.gen_range(2..4));
        (
            vec![tensor(r, &[n, c, h, w]), tensor(r, &[c]), tensor(r, &[c])],
            Box::new(|g, v| g.batch_norm(v[0], v[1], v[2], None, 1e-5)),
        )
    });
    suite("batch_norm_eval", |r| {
        let (n, c, w) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5));
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.2..2.0)).collect();
        (
            vec![tensor(r, &[n, c, 1, w]), tensor(r, &[c]), tensor(r, &[c])],
            Box::new(move |g, v| g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)),
        )
    });
}

pub fn capsule_ops() {
    suite("squash", |r| {
        let s = dims(r, 3, 4);
        (vec![tensor(r, &s)], Box::new(|g, v| g.squash(v[0])))
    });
    suite("caps_predict", |r| {
        let (n, i, j, dout, din) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        (
            vec![tensor(r, &[n, i, din]), tensor(r, &[i, j, dout, din])],
            Box::new(|g, v| g.caps_predict(v[0], v[1])),
        )
    });
    suite("weighted_sum", |r| {
        let (n, i, j, d) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        (
            vec![tensor(r, &[n, i, j]), tensor(r, &[n, i, j, d])],
            Box::new(|g, v| g.weighted_sum(v[0], v[1])),
        )
    });
    suite("agreement", |r| {
        let (n, i, j, d) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        (
            vec![tensor(r, &[n, i, j, d]), tensor(r, &[n, j, d])],
            Box::new(|g, v| g.agreement(v[0], v[1])),
        )
    });
}

pub fn loss_ops() {
    suite("mse", |r| {
        let s = dims(r, 2, 5);
        let n = s.iter().product();
        let target: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        (vec![tensor(r, &s)], Box::new(move |g, v| g.mse(v[0], &target)))
    });
    suite("margin_loss", |r| {
        let (n, k) = (r.gen_range(1..4), r.gen_range(2..5));
        // lengths spread over both hinge regions but clear of the margins
        let pool = [0.02, 0.05, 0.3, 0.5, 0.7, 0.85, 0.95];
        let vals: Vec<f64> = (0..n * k).map(|_| pool[r.gen_range(0..pool.len())] + r.gen_range(0.0..0.01)).collect();
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        (
            vec![Tensor::new(&[n, k], vals).unwrap()],
            Box::new(move |g, v| g.margin_loss(v[0], &targets, 0.9, 0.1, 0.5)),
        )
    });
    suite("softmax_cross_entropy", |r| {
        let (n, k) = (r.gen_range(1..5), r.gen_range(2..6));
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        (
            vec![tensor(r, &[n, k])],
            Box::new(move |g, v| g.softmax_cross_entropy(v[0], &targets)),
        )
    });
}

pub fn routing_chain_gradient() {
    suite("routing", |r| {
        let (i, j, d) = (r.gen_range(2..5), r.gen_range(2..4), r.gen_range(2..5));
        (
            vec![tensor(r, &[1, i, j, d])],
            Box::new(move |g, v| {
                let mut b = g.constant(Tensor::zeros(&[1, i, j]));
                let mut out = v[0];
                for it in 0..3 {
                    let c = g.softmax(b, 2)?;
                    let s = g.weighted_sum(c, v[0])?;
                    out = g.squash(s)?;
                    if it < 2 {
                        let a = g.agreement(v[0], out)?;
                        b = g.add(b, a)?;
                    }
                }
                g.norm_axis(out, 2)
            }),
        )
    });
}

fn micro_features(seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    FeatureMatrix {
        rows: 40,
        cols: 8,
        values: (0..320).map(|_| r.gen_range(-2.0..2.0)).collect(),
        n_valid_frames: 8,
    }
}

/// Worst per-tensor relative error of a whole micro capsule network.
pub fn micro_capsnet_end_to_end_gradient() -> f64 {
    let cfg = ModelConfig {
        architecture: Architecture::CapsnetM,
        geometry: GeometryPreset::Micro,
        n_classes: 2,
        input_frames: 8,
        decoder_enabled: true,
        decoder_hidden: 8,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg, 11).unwrap();
    let feats = [micro_features(1), micro_features(2), micro_features(3)];
    let batch: Vec<&FeatureMatrix> = feats.iter().collect();
    let targets = [0, 1, 1];
    let step = model.train_step(&batch, &targets, 0).unwrap();

    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    let mut sampler = rng(5);
    let mut worst: f64 = 0.0;
    for (p, name) in names.iter().enumerate() {
        let len = model.param_sizes()[p];
        let picks: Vec<usize> = if len <= 48 {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut sampler, len, 48).into_vec()
        };
        let base = model.param(name).unwrap().data().to_vec();
        let mut probe_model = model.clone();
        let mut f = |x: &[f64]| {
            let mut full = base.clone();
            for (slot, v) in picks.iter().zip(x) {
                full[*slot] = *v;
            }
            probe_model.params_mut()[p].copy_from_slice(&full);
            probe_model.train_loss(&batch, &targets, 0).unwrap()
        };
        let x0: Vec<f64> = picks.iter().map(|&i| base[i]).collect();
        let numeric = central_difference(&mut f, &x0, H);
        let analytic: Vec<f64> = picks.iter().map(|&i| step.grads[p][i]).collect();
        // decoder gradients carry α = 0.0005 and sit near 1e-9, where central
        // differences of an O(1) loss are only good to ~1e-12 absolute
        let e = rel_err_floor(&analytic, &numeric, 1e-6);
        assert!(e <= 1e-4, "{name}: rel err {e:e}");
        worst = worst.max(e);
    }
    assert!(worst.is_finite());
    worst
}
