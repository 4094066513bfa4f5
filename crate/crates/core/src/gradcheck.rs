//! Finite-difference checks of every gradient path, shared by the CLI and tests.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, grad, grad_values, relative_error, Tape, Var};
use crate::error::Result;
use crate::meta::{window_loss, TrainConfig};
use crate::model::{self, fuse, Dims, FusedInput, MetaParams, PARAM_NAMES};
use crate::tensor::Matrix;
use crate::ttt::MetaGradMode;

pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOLERANCE: f64 = 1e-6;
pub const SECOND_ORDER_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub group: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn max_error(&self, suite: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.suite == suite)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("suite\tgroup\tmax_rel_error\ttolerance\tstatus\n");
        for c in &self.checks {
            writeln!(
                s,
                "{}\t{}\t{:.3e}\t{:.0e}\t{}",
                c.suite,
                c.group,
                c.rel_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            )
            .expect("string write");
        }
        s
    }
}

/// Dimensions of the toy problem: `d = 4`, `d' = 3`, head width 5.
pub fn toy_dims() -> Dims {
    Dims::new(4, 3, 5).expect("valid toy dims")
}

/// Random parameters with every tensor non-zero, so no path is trivially flat.
pub fn toy_params(seed: u64) -> MetaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = MetaParams::init(toy_dims(), &mut rng);
    p.map(|m| Matrix::from_fn(m.rows(), m.cols(), |_, _| rng.random_range(-0.8..0.8)))
}

pub fn toy_frames(seed: u64, n: usize) -> Vec<FusedInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let goal: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            fuse(&v, &goal).expect("matching halves")
        })
        .collect()
}

/// Compares reverse-mode and central-difference gradients of `loss` with
/// respect to the tensors at `indices`, one check per tensor.
fn compare(
    suite: &str,
    names: &[&str],
    values: &[Matrix],
    indices: &[usize],
    tolerance: f64,
    loss: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
) -> Result<Vec<Check>> {
    let tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|m| tape.var(m.clone())).collect();
    let l = loss(&tape, &vars)?;
    let targets: Vec<Var> = indices.iter().map(|&i| vars[i]).collect();
    let analytic = grad_values(l, &targets)?;
    let mut checks = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let numeric = finite_diff_grad(
            |p| {
                let tape = Tape::new();
                let mut all: Vec<Var> = values.iter().map(|m| tape.var(m.clone())).collect();
                all[i] = tape.var(p[0].clone());
                loss(&tape, &all).map(|v| v.item()).unwrap_or(f64::NAN)
            },
            std::slice::from_ref(&values[i]),
            FD_STEP,
        );
        checks.push(Check {
            suite: suite.into(),
            group: names[i].into(),
            rel_error: relative_error(&analytic[k], &numeric[0]),
            tolerance,
        });
    }
    Ok(checks)
}

fn meta_from<'t>(vars: &[Var<'t>]) -> MetaParams<Var<'t>> {
    MetaParams::from_tensors(vars[..PARAM_NAMES.len()].iter().copied()).expect("eleven tensors")
}

/// First-order checks of the reconstruction and prediction losses.
pub fn model_checks(seed: u64) -> Result<Vec<Check>> {
    let meta = toy_params(seed);
    let x = toy_frames(seed, 1).remove(0);
    let mut values = meta.to_vec();
    values.push(x.as_matrix().clone());
    let label = 0.6;
    // theta0 (0..4) and the key/value projections (5, 6)
    let self_checks = compare(
        "self_loss",
        &PARAM_NAMES,
        &values,
        &[0, 1, 2, 3, 5, 6],
        FIRST_ORDER_TOLERANCE,
        &|_, v| {
            let m = meta_from(v);
            Ok(model::self_loss(v[11], &m.theta0, &m.proj))
        },
    )?;
    // theta0, query projection, head
    let pred_checks = compare(
        "pred_loss",
        &PARAM_NAMES,
        &values,
        &[0, 1, 2, 3, 4, 7, 8, 9, 10],
        FIRST_ORDER_TOLERANCE,
        &|_, v| {
            let m = meta_from(v);
            model::pred_loss(model::predict(v[11], &m.theta0, &m.proj, &m.head), label)
        },
    )?;
    Ok(self_checks.into_iter().chain(pred_checks).collect())
}

/// Outer gradient of a two-frame window objective through the inner updates.
pub fn meta_checks(seed: u64) -> Result<Vec<Check>> {
    let meta = toy_params(seed);
    let frames = toy_frames(seed.wrapping_add(1), 2);
    let labels = [0.5, 1.0];
    let cfg = TrainConfig {
        window_len: 2,
        self_weight: 0.5,
        inner_lr: 0.1,
        meta_grad_mode: MetaGradMode::Exact,
        ..TrainConfig::default()
    };
    let all: Vec<usize> = (0..PARAM_NAMES.len()).collect();
    compare(
        "window_loss",
        &PARAM_NAMES,
        &meta.to_vec(),
        &all,
        SECOND_ORDER_TOLERANCE,
        &|tape, v| {
            let xs: Vec<Var> = frames.iter().map(|x| x.lift(tape)).collect();
            Ok(window_loss(&meta_from(v), &xs, &labels, &cfg)?.total)
        },
    )
}

/// `g(theta - eta grad l(theta))` for a quadratic-plus-GELU `l` and a
/// sigmoid-based `g`, differentiated through the inner gradient.
pub fn nested_check(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let values = vec![m(3, 1), m(3, 3), m(1, 3)];
    let checks = compare(
        "nested",
        &["theta", "a", "b"],
        &values,
        &[0, 1, 2],
        SECOND_ORDER_TOLERANCE,
        &|_, v| {
            let (theta, a, b) = (v[0], v[1], v[2]);
            let inner = a.matmul(theta).gelu().sq_norm() + theta.sq_norm().scale(0.5);
            let g = grad(inner, &[theta])?.remove(0);
            let moved = theta - g.scale(0.3);
            Ok(b.matmul(moved).sigmoid())
        },
    )?;
    Ok(checks.into_iter().fold(
        Check {
            suite: "nested".into(),
            group: "all".into(),
            rel_error: 0.0,
            tolerance: SECOND_ORDER_TOLERANCE,
        },
        |acc, c| Check {
            rel_error: acc.rel_error.max(c.rel_error),
            ..acc
        },
    ))
}

/// One check per tape primitive, each reduced to a scalar through a random weighting.
pub fn primitive_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5));
    let values = vec![m(3, 4), m(3, 4), m(4, 2), m(3, 2), m(1, 1)];
    type Prim = for<'t> fn(&[Var<'t>]) -> Var<'t>;
    let prims: [(&str, Prim); 12] = [
        ("add", |v| v[0] + v[1]),
        ("sub", |v| v[0] - v[1]),
        ("mul", |v| v[0] * v[1]),
        ("neg", |v| -v[0]),
        ("affine", |v| v[0].affine(1.7, -0.3)),
        ("matmul", |v| v[0].matmul(v[2])),
        ("transpose", |v| v[0].t().matmul(v[3])),
        ("gelu", |v| v[0].gelu()),
        ("sigmoid", |v| v[0].sigmoid()),
        ("sum", |v| v[0].sum()),
        ("sq_norm", |v| v[0].sq_norm()),
        ("broadcast", |v| v[4].broadcast(3, 4) * v[0]),
    ];
    let mut checks = Vec::new();
    for (name, op) in prims {
        let used: Vec<usize> = match name {
            "add" | "sub" | "mul" => vec![0, 1],
            "matmul" => vec![0, 2],
            "transpose" => vec![0, 3],
            "broadcast" => vec![0, 4],
            _ => vec![0],
        };
        let found = compare(
            "primitive",
            &["a", "b", "c", "d", "s"],
            &values,
            &used,
            FIRST_ORDER_TOLERANCE,
            &|tape, v| {
                let out = op(v);
                let (r, c) = out.shape();
                let w = tape.var(Matrix::from_fn(r, c, |i, j| {
                    ((i * 7 + j * 3) as f64 * 0.37).sin() + 0.1
                }));
                Ok((out * w).sum())
            },
        )?;
        checks.push(Check {
            suite: "primitive".into(),
            group: name.into(),
            rel_error: found.iter().map(|c| c.rel_error).fold(0.0, f64::max),
            tolerance: FIRST_ORDER_TOLERANCE,
        });
    }
    Ok(checks)
}

/// Runs the first-order suites, plus the second-order ones when asked.
pub fn run(second_order: bool, seed: u64) -> Result<Report> {
    let mut checks = primitive_checks(seed)?;
    checks.extend(model_checks(seed)?);
    if second_order {
        checks.push(nested_check(seed)?);
        checks.extend(meta_checks(seed)?);
    }
    Ok(Report { checks })
}
