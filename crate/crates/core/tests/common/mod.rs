#![allow(dead_code)]

use debias_core::autodiff::{Graph, Var};
use debias_core::gradcheck::{grad_check, DEFAULT_STEP};
use debias_core::model::{ClassifierParams, InputView, ModelDims};
use debias_core::tensor::Tensor;
use debias_core::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
    /// |x| ≥ 0.1, away from kinks.
    AwayFromZero,
}

pub struct OpCase {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub domain: Domain,
    pub build: fn(&mut Graph, Var) -> Result<Var>,
}

fn fixed(shape: &[usize], salt: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|i| (salt + 0.9 * i as f64).sin() + 0.2)
        .collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Weighted sum of every output entry with fixed, distinct weights.
pub fn project(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    if shape.is_empty() {
        return Ok(v);
    }
    let w = g.constant(&fixed(&shape, 0.37));
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

macro_rules! case {
    ($name:expr, $shape:expr, $domain:expr, |$g:ident, $x:ident| $body:expr) => {
        OpCase {
            name: $name,
            shape: $shape,
            domain: $domain,
            build: |$g: &mut Graph, $x: Var| -> Result<Var> {
                let out = $body;
                project($g, out)
            },
        }
    };
}

pub fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        case!("matmul/lhs", &[2, 3], Any, |g, x| {
            let b = g.constant(&fixed(&[3, 4], 1.0));
            g.matmul(x, b)?
        }),
        case!("matmul/rhs", &[3, 4], Any, |g, x| {
            let a = g.constant(&fixed(&[2, 3], 2.0));
            g.matmul(a, x)?
        }),
        case!("add", &[2, 3], Any, |g, x| {
            let b = g.constant(&fixed(&[2, 3], 3.0));
            g.add(x, b)?
        }),
        case!("add/broadcast-scalar", &[], Any, |g, x| {
            let b = g.constant(&fixed(&[2, 3], 3.0));
            g.add(b, x)?
        }),
        case!("sub", &[2, 3], Any, |g, x| {
            let b = g.constant(&fixed(&[2, 3], 4.0));
            g.sub(b, x)?
        }),
        case!("mul", &[2, 3], Any, |g, x| {
            let b = g.constant(&fixed(&[2, 3], 5.0));
            g.mul(x, b)?
        }),
        case!("mul/self", &[2, 3], Any, |g, x| g.mul(x, x)?),
        case!("mul/broadcast-scalar", &[], Any, |g, x| {
            let b = g.constant(&fixed(&[3], 6.0));
            g.mul(x, b)?
        }),
        case!("add_scalar", &[4], Any, |g, x| g.add_scalar(x, 0.7)),
        case!("mul_scalar", &[4], Any, |g, x| g.mul_scalar(x, -1.3)),
        case!("neg", &[4], Any, |g, x| g.neg(x)),
        case!("pow_scalar", &[4], Positive, |g, x| g.pow_scalar(x, 1.7)?),
        case!("pow_scalar/integer", &[4], Any, |g, x| g
            .pow_scalar(x, 3.0)?),
        case!("tanh", &[2, 3], Any, |g, x| g.tanh(x)),
        case!("relu", &[2, 3], AwayFromZero, |g, x| g.relu(x)),
        case!("exp", &[2, 3], Any, |g, x| g.exp(x)),
        case!("log", &[2, 3], Positive, |g, x| g.log(x)?),
        case!("log_softmax", &[2, 4], Any, |g, x| g.log_softmax(x)?),
        case!("sum/axis0", &[3, 2], Any, |g, x| g.sum(x, 0)?),
        case!("sum/axis1", &[3, 2], Any, |g, x| g.sum(x, 1)?),
        case!("mean/axis0", &[3, 2], Any, |g, x| g.mean(x, 0)?),
        case!("mean/axis1", &[3, 2], Any, |g, x| g.mean(x, 1)?),
        case!("l2_norm/axis0", &[3, 2], AwayFromZero, |g, x| g
            .l2_norm(x, 0)?),
        case!("l2_norm/axis1", &[3, 2], AwayFromZero, |g, x| g
            .l2_norm(x, 1)?),
        case!("sum_all", &[2, 3], Any, |g, x| g.sum_all(x)),
        case!("embedding_gather", &[5, 3], Any, |g, x| g
            .embedding_gather(x, &[4, 0, 4, 2])?),
        case!("select", &[1, 5], Any, |g, x| g.select(x, &[3, 1])?),
        case!("pick", &[1, 5], Any, |g, x| g.pick(x, 2)?),
    ]
}

pub fn random_point(shape: &[usize], domain: Domain, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(-2.0..2.0);
            match domain {
                Domain::Any => u,
                Domain::Positive => 0.2 + u.abs(),
                Domain::AwayFromZero => u.signum() * (0.1 + u.abs()),
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Worst relative error per op over `points` random points.
pub fn op_errors(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|case| {
            let worst = (0..points)
                .map(|_| {
                    let p = random_point(case.shape, case.domain, &mut rng);
                    grad_check(case.build, &p, DEFAULT_STEP).unwrap()
                })
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}

pub const MODEL_DIMS: ModelDims = ModelDims {
    vocab_size: 7,
    embed_dim: 3,
    hidden_dim: 4,
    num_classes: 3,
};

/// Main-model loss of the full classifier (cross-entropy plus a PoE term
/// against fixed biased log-probs) checked against each parameter tensor.
pub fn model_errors(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..points {
        let params = ClassifierParams::init(MODEL_DIMS, &mut rng).unwrap();
        let mut tensors = params.tensors().map(|t| t.clone());
        for t in tensors.iter_mut() {
            for v in t.values_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let ids: Vec<usize> = (0..5)
            .map(|_| rng.random_range(0..MODEL_DIMS.vocab_size))
            .collect();
        let visible: Vec<bool> = (0..5).map(|i| i == 0 || rng.random_bool(0.6)).collect();
        let view = InputView::masked(ids, visible).unwrap();
        let gold = rng.random_range(0..MODEL_DIMS.num_classes);
        let biased = [-0.2f64, -1.9, -2.8];
        let norm = biased.iter().map(|b| b.exp()).sum::<f64>().ln();
        let biased: Vec<f64> = biased.iter().map(|b| b - norm).collect();

        for (k, w) in worst.iter_mut().enumerate() {
            *w = w.max(model_param_error(&tensors, k, &view, &biased, gold));
        }
    }
    debias_core::model::PARAM_NAMES
        .iter()
        .copied()
        .zip(worst)
        .collect()
}

fn model_param_error(
    tensors: &[Tensor; 5],
    k: usize,
    view: &InputView,
    biased: &[f64],
    gold: usize,
) -> f64 {
    use debias_core::losses::{ce_loss, poe_loss};
    let loss_at = |point: &Tensor| -> Result<(f64, Vec<f64>)> {
        let mut ts = tensors.clone();
        ts[k] = point.clone();
        let p = ClassifierParams::from_tensors(MODEL_DIMS, ts)?;
        let mut g = Graph::new();
        let fv = p.build(&mut g, view)?;
        let lp = g.log_softmax(fv.logits)?;
        let b = g.constant_values(vec![1, biased.len()], biased.to_vec())?;
        let ce = ce_loss(&mut g, lp, gold)?;
        let poe = poe_loss(&mut g, lp, b, gold)?;
        let poe = g.mul_scalar(poe, 0.6);
        let total = g.add(ce, poe)?;
        let grads = g.backward(total)?;
        Ok((g.scalar_value(total), grads.get(fv.params[k]).into_values()))
    };
    let (_, analytic) = loss_at(&tensors[k]).unwrap();
    let numeric = debias_core::gradcheck::numerical_gradient(
        |p| loss_at(p).map(|(v, _)| v),
        &tensors[k],
        DEFAULT_STEP,
    )
    .unwrap();
    debias_core::gradcheck::max_relative_error(&analytic, &numeric)
}
