//! Central finite-difference checks for every differentiable op and for
//! small end-to-end models.
//!
//! The error for one input is `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`;
//! a check reports the maximum over its inputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Strategy;
use crate::error::Result;
use crate::graph::SkeletonGraph;
use crate::model::{ForecastModel, ModelConfig};
use crate::optim::Bound;
use crate::tensor::{Mask, OpKind, SparseOperator, Tensor};
use crate::train::mpjpe_loss;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// One input to a checked function: values and shape.
#[derive(Debug, Clone)]
pub struct Input {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Input {
    pub fn random(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Input {
            values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            shape: shape.to_vec(),
        }
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step [`STEP`].
pub fn check_function(inputs: &[Input], f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<f64> {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|i| Tensor::parameter(i.values.clone(), &i.shape))
        .collect::<Result<_>>()?;
    f(&leaves)?.backward()?;

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let consts: Vec<Tensor> = values
            .iter()
            .zip(inputs)
            .map(|(v, i)| Tensor::new(v.clone(), &i.shape))
            .collect::<Result<_>>()?;
        Ok(f(&consts)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let orig = values[i][j];
            values[i][j] = orig + STEP;
            let plus = eval(&values)?;
            values[i][j] = orig - STEP;
            let minus = eval(&values)?;
            values[i][j] = orig;
            numeric[j] = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar
/// that depends on every element.
fn weighted_sum(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Input::random(out.shape(), &mut rng);
    out.mul(&Tensor::new(r.values, &r.shape)?).map(|t| t.sum())
}

fn random_mask(shape: &[usize], axis: usize, rng: &mut impl Rng) -> Mask {
    let n: usize = shape.iter().product();
    let mut allowed: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    // Guarantee one allowed entry per slice.
    for o in 0..n / (len * inner) {
        for i in 0..inner {
            let at = (o * len + rng.random_range(0..len)) * inner + i;
            allowed[at] = true;
        }
    }
    Mask::new(shape, allowed).expect("shape matches")
}

fn check_op(kind: OpKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| Input::random(shape, rng);
    match kind {
        OpKind::MatMul => {
            let a = check_function(&[r(&[2, 3, 4], rng), r(&[4, 5], rng)], |t| {
                weighted_sum(&t[0].matmul(&t[1])?, 1)
            })?;
            let b = check_function(&[r(&[3, 4], rng), r(&[2, 4, 2], rng)], |t| {
                weighted_sum(&t[0].matmul(&t[1])?, 2)
            })?;
            Ok(a.max(b))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let kind = match kind {
                OpKind::Add => crate::tensor::BinaryKind::Add,
                OpKind::Sub => crate::tensor::BinaryKind::Sub,
                _ => crate::tensor::BinaryKind::Mul,
            };
            let same = check_function(&[r(&[3, 4], rng), r(&[3, 4], rng)], |t| {
                weighted_sum(&t[0].binary(&t[1], kind)?, 3)
            })?;
            let broadcast = check_function(&[r(&[2, 1, 4], rng), r(&[3, 1], rng)], |t| {
                weighted_sum(&t[0].binary(&t[1], kind)?, 4)
            })?;
            Ok(same.max(broadcast))
        }
        OpKind::Tanh => check_function(&[r(&[10], rng)], |t| weighted_sum(&t[0].scale(2.0).tanh(), 5)),
        OpKind::MaskedSoftmax => {
            let shape = [2, 3, 4];
            let m2 = random_mask(&shape, 2, rng);
            let m1 = random_mask(&shape, 1, rng);
            let last = check_function(&[r(&shape, rng)], |t| weighted_sum(&t[0].masked_softmax(&m2, 2)?, 6))?;
            let mid = check_function(&[r(&shape, rng)], |t| weighted_sum(&t[0].masked_softmax(&m1, 1)?, 7))?;
            Ok(last.max(mid))
        }
        OpKind::Sum => check_function(&[r(&[3, 4], rng)], |t| Ok(t[0].mul(&t[0])?.sum())),
        OpKind::Mean => check_function(&[r(&[3, 4], rng)], |t| Ok(t[0].mul(&t[0])?.mean())),
        OpKind::Norm => check_function(&[r(&[4, 3], rng)], |t| weighted_sum(&t[0].norm_last()?, 8)),
        OpKind::Reshape => check_function(&[r(&[2, 6], rng)], |t| weighted_sum(&t[0].reshape(&[3, 4])?, 9)),
        OpKind::Permute => check_function(&[r(&[2, 3, 4], rng)], |t| {
            weighted_sum(&t[0].permute(&[2, 0, 1])?, 10)
        }),
        OpKind::Narrow => check_function(&[r(&[3, 5], rng)], |t| weighted_sum(&t[0].narrow(1, 1, 3)?, 11)),
        OpKind::Scale => check_function(&[r(&[5], rng)], |t| weighted_sum(&t[0].scale(-0.7), 12)),
        OpKind::Propagate => {
            let n = 5;
            let mut dense = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    if rng.random_bool(0.5) {
                        let v = rng.random_range(-1.0..1.0);
                        dense[i * n + j] = v;
                        dense[j * n + i] = v;
                    }
                }
            }
            // Nonsymmetric entry so the adjoint is really exercised.
            dense[1] += 0.5;
            let op = Arc::new(SparseOperator::from_dense(n, &dense));
            check_function(&[r(&[2, n, 3], rng)], |t| weighted_sum(&t[0].propagate(&op)?, 13))
        }
    }
}

/// Loss gradient of a tiny model (`chain_4`, `T = 3`, `K = 2`, channels
/// `{3, 4, 3}`) with all parameters randomized.
pub fn check_end_to_end(strategy: Strategy, seed: u64) -> Result<f64> {
    let skeleton = SkeletonGraph::new(4, [(0, 1), (1, 2), (2, 3)])?;
    let mut config = ModelConfig::new(3, 2, 1, 1, strategy).with_channels(&[3, 4, 3]);
    config.anchor_count = 3;
    let mut model = ForecastModel::new(skeleton, config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params_mut().iter_mut() {
        p.values.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    let x = Input::random(&[2, 3, 4, 3], &mut rng);
    let y = Input::random(&[2, 2, 4, 3], &mut rng);
    let x = Tensor::new(x.values, &x.shape)?;
    let y = Tensor::new(y.values, &y.shape)?;

    let inputs: Vec<Input> = model
        .params()
        .iter()
        .map(|p| Input {
            values: p.values.clone(),
            shape: p.shape.clone(),
        })
        .collect();
    check_function(&inputs, |leaves| {
        let bound = Bound::from_tensors(leaves.to_vec());
        mpjpe_loss(&model.forward(&bound, &x)?.predictions, &y)
    })
}

pub const STRATEGIES: [Strategy; 4] = [
    Strategy::PseudoAutoregressive,
    Strategy::Anchor,
    Strategy::Plain,
    Strategy::None,
];

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::PseudoAutoregressive => "pseudo_autoregressive",
        Strategy::Anchor => "anchor",
        Strategy::Plain => "plain",
        Strategy::None => "none",
    }
}

/// Every op once, then one end-to-end check per attention strategy.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut results = Vec::new();
    for kind in OpKind::ALL {
        results.push(CheckResult {
            name: kind.name().to_owned(),
            max_rel_error: check_op(kind, &mut rng)?,
        });
    }
    for (i, s) in STRATEGIES.into_iter().enumerate() {
        results.push(CheckResult {
            name: format!("end_to_end/{}", strategy_name(s)),
            max_rel_error: check_end_to_end(s, 100 + i as u64)?,
        });
    }
    Ok(results)
}
