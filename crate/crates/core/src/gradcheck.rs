//! Finite-difference gradient suites, shared by the test targets and the
//! `gradcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{self, FocalConfig};
use crate::model::{Model, ModelConfig, ModelKind, SliceTriplet};
use crate::tensor::finite_diff::{finite_diff_grad, gradient_error};
use crate::tensor::{Axes, BatchNormState, Graph, NormMode, Tensor, Var};

/// Step for central differences in f64.
pub const STEP: f64 = 1e-4;
/// Step for the end-to-end check. The network holds thousands of relu and
/// batch-norm inputs, and a 1e-4 step regularly straddles one of the kinks.
pub const MODEL_STEP: f64 = 1e-5;
/// Tolerance for op-level checks.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_abs_error.is_finite() && self.max_abs_error <= self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Contracts an arbitrary-shaped output to a scalar with fixed random weights,
/// so every output element contributes a distinct coefficient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(y), &mut rng, -1.0, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p, Axes::All)
}

/// Maximum gradient error of `build` w.r.t. each of `inputs` in turn, the
/// others held constant.
fn check_inputs(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let err = gradient_error(
            |g, v| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { v } else { g.constant(t.clone()) })
                    .collect();
                build(g, &vars)
            },
            &inputs[k],
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs every differentiable primitive on `cases` random inputs each.
pub fn op_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    type Case = Box<dyn Fn(&mut ChaCha8Rng, u64) -> Result<f64>>;
    let checks: Vec<(&str, Case)> = vec![
        (
            "conv2d",
            Box::new(|rng, s| {
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let ins = vec![
                    random(&[2, 2, 5, 5], rng, -1.0, 1.0),
                    random(&[3, 2, 3, 3], rng, -1.0, 1.0),
                    random(&[3], rng, -1.0, 1.0),
                ];
                check_inputs(&ins, |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(g, y, s)
                })
            }),
        ),
        (
            "conv_transpose2d",
            Box::new(|rng, s| {
                let stride = rng.random_range(1..=2);
                let ins = vec![
                    random(&[2, 3, 3, 3], rng, -1.0, 1.0),
                    random(&[3, 2, 2, 2], rng, -1.0, 1.0),
                    random(&[2], rng, -1.0, 1.0),
                ];
                check_inputs(&ins, |g, v| {
                    let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, 0)?;
                    project(g, y, s)
                })
            }),
        ),
        (
            "batch_norm2d",
            Box::new(|rng, s| {
                let ins = vec![
                    random(&[2, 3, 3, 3], rng, -2.0, 2.0),
                    random(&[3], rng, 0.5, 1.5),
                    random(&[3], rng, -0.5, 0.5),
                ];
                let mut worst: f64 = 0.0;
                for mode in [NormMode::Train, NormMode::Eval] {
                    let err = check_inputs(&ins, |g, v| {
                        let mut st = BatchNormState {
                            running_mean: vec![0.1, -0.2, 0.3],
                            running_var: vec![0.8, 1.1, 1.4],
                        };
                        let y = g.batch_norm2d(v[0], v[1], v[2], &mut st, mode, 0.1, 1e-5)?;
                        project(g, y, s)
                    })?;
                    worst = worst.max(err);
                }
                Ok(worst)
            }),
        ),
        (
            "relu",
            Box::new(|rng, s| {
                // Keep samples away from the kink at 0.
                let x = Tensor::from_fn(&[2, 3], |_| {
                    let m = rng.random_range(0.05..1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                });
                check_inputs(&[x], |g, v| {
                    let y = g.relu(v[0]);
                    project(g, y, s)
                })
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng, s| {
                let x = random(&[2, 3], rng, -3.0, 3.0);
                check_inputs(&[x], |g, v| {
                    let y = g.sigmoid(v[0]);
                    project(g, y, s)
                })
            }),
        ),
        (
            "add/sub/mul",
            Box::new(|rng, s| {
                let ins = vec![
                    random(&[2, 3], rng, -1.0, 1.0),
                    random(&[2, 3], rng, -1.0, 1.0),
                ];
                check_inputs(&ins, |g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.sub(v[0], v[1])?;
                    let c = g.mul(a, b)?;
                    let d = g.mul(c, v[0])?;
                    project(g, d, s)
                })
            }),
        ),
        (
            "scalar ops",
            Box::new(|rng, s| {
                let x = random(&[2, 3], rng, 0.1, 0.9);
                check_inputs(&[x], |g, v| {
                    let a = g.mul_scalar(v[0], -1.7);
                    let b = g.add_scalar(a, 2.5);
                    let c = g.rsub_scalar(1.0, b);
                    project(g, c, s)
                })
            }),
        ),
        (
            "pow",
            Box::new(|rng, s| {
                let x = random(&[2, 3], rng, 0.05, 0.95);
                let gamma = [0.5, 1.0, 2.0, 3.0][rng.random_range(0..4)];
                check_inputs(&[x], |g, v| {
                    let y = g.pow_scalar(v[0], gamma);
                    project(g, y, s)
                })
            }),
        ),
        (
            "log_shift",
            Box::new(|rng, s| {
                let x = random(&[2, 3], rng, 0.1, 1.0);
                check_inputs(&[x], |g, v| {
                    let y = g.log_shift(v[0], 1e-7)?;
                    project(g, y, s)
                })
            }),
        ),
        (
            "concat",
            Box::new(|rng, s| {
                let ins = vec![
                    random(&[1, 2, 3, 3], rng, -1.0, 1.0),
                    random(&[1, 3, 3, 3], rng, -1.0, 1.0),
                ];
                check_inputs(&ins, |g, v| {
                    let y = g.concat(&[v[0], v[1], v[0]], 1)?;
                    project(g, y, s)
                })
            }),
        ),
        (
            "reshape",
            Box::new(|rng, s| {
                let x = random(&[2, 3], rng, -1.0, 1.0);
                check_inputs(&[x], |g, v| {
                    let y = g.reshape(v[0], &[3, 2])?;
                    project(g, y, s)
                })
            }),
        ),
        (
            "narrow",
            Box::new(|rng, s| {
                let x = random(&[2, 4, 3], rng, -1.0, 1.0);
                check_inputs(&[x], |g, v| {
                    let y = g.narrow(v[0], 1, 1, 2)?;
                    project(g, y, s)
                })
            }),
        ),
        (
            "sum/mean",
            Box::new(|rng, s| {
                let x = random(&[2, 3, 4], rng, -1.0, 1.0);
                check_inputs(&[x], |g, v| {
                    let a = g.sum(v[0], Axes::List(vec![1]))?;
                    let b = g.mean(a, Axes::List(vec![0]))?;
                    let c = project(g, b, s)?;
                    let d = g.mean(v[0], Axes::All)?;
                    g.add(c, d)
                })
            }),
        ),
        (
            "focal_loss",
            Box::new(|rng, _| {
                let (y_true, y_pred) = random_pair(rng, &[1, 1, 2, 2]);
                let cfg = FocalConfig::default();
                check_inputs(&[y_pred], |g, v| {
                    let t = g.constant(y_true.clone());
                    loss::focal_loss(g, t, v[0], &cfg)
                })
            }),
        ),
        (
            "sbfl (beta frozen)",
            Box::new(|rng, _| {
                let (y_true, y_pred) = random_pair(rng, &[1, 1, 2, 2]);
                let cfg = FocalConfig::default();
                let beta = {
                    let mut g = Graph::new();
                    let t = g.constant(y_true.clone());
                    let p = g.constant(y_pred.clone());
                    loss::sbfl(&mut g, t, p, &cfg)?.1.beta
                };
                check_inputs(&[y_pred], |g, v| {
                    let t = g.constant(y_true.clone());
                    loss::sbfl_with_beta(g, t, v[0], &cfg, beta)
                })
            }),
        ),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(checks.len());
    for (name, check) in checks {
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            worst = worst.max(check(&mut rng, seed ^ (case as u64 + 1))?);
        }
        results.push(CheckResult {
            name: name.to_string(),
            cases,
            max_abs_error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(results)
}

/// Binary mask with at least one pixel of each class, and predictions in (0.1, 0.9).
pub fn random_pair(rng: &mut impl Rng, shape: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    let n: usize = shape.iter().product();
    let mut mask: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    if n >= 2 {
        mask[0] = 1.0;
        mask[1] = 0.0;
    }
    let pred = Tensor::from_fn(shape, |_| rng.random_range(0.1..0.9));
    (Tensor::new(shape, mask).expect("shape"), pred)
}

/// End-to-end check: gradient of the SBFL total (beta frozen at its forward
/// value) w.r.t. every model parameter, against central differences.
pub fn model_check(
    kind: ModelKind,
    base_channels: usize,
    input_size: usize,
    seed: u64,
) -> Result<CheckResult> {
    let cfg = ModelConfig {
        base_channels,
        input_size,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(kind, cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let shape = [2, 1, input_size, input_size];
    let triplet = SliceTriplet {
        prev: random(&shape, &mut rng, 0.0, 1.0),
        cur: random(&shape, &mut rng, 0.0, 1.0),
        next: random(&shape, &mut rng, 0.0, 1.0),
        target: Tensor::from_fn(&shape, |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }),
    };
    let focal = FocalConfig::default();

    let mut analytic_model = model.clone();
    let mut g = Graph::new();
    let pred = analytic_model.forward(&mut g, &triplet, NormMode::Train)?;
    let t = g.constant(triplet.target.clone());
    let (total, report) = loss::sbfl(&mut g, t, pred, &focal)?;
    g.backward(total)?;
    analytic_model.params.accumulate_grads(&g);
    let beta = report.beta;

    let loss_at = |m: &Model<f64>| -> f64 {
        let mut m = m.clone();
        let mut g = Graph::new();
        let pred = m
            .forward(&mut g, &triplet, NormMode::Train)
            .expect("forward");
        let t = g.constant(triplet.target.clone());
        let l = loss::sbfl_with_beta(&mut g, t, pred, &focal, beta).expect("loss");
        g.value(l).item()
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        let base = model.params.get(name)?.clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                *m.params.get_mut(name).expect("known name") = p.clone();
                loss_at(&m)
            },
            &base,
            MODEL_STEP,
        );
        let analytic = analytic_model
            .params
            .param(name)
            .and_then(|p| p.grad.clone())
            .unwrap_or_else(|| vec![0.0; base.numel()]);
        for (a, n) in analytic.iter().zip(numeric.data()) {
            worst = worst.max((a - n).abs());
        }
    }
    Ok(CheckResult {
        name: format!("{} end-to-end + sbfl", kind.name()),
        cases: names.len(),
        max_abs_error: worst,
        tolerance: MODEL_TOLERANCE,
    })
}
