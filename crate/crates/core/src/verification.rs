//! Finite-difference verification of every graph primitive and every
//! full architecture.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, grad_check, Array, GradMap, Graph, ParamSet, Tensor};
use crate::features::{FeatureKind, Sample};
use crate::models::{batch_targets, build_model, Arch, Model, ModelSizes};
use crate::rng::stream;

const FD_EPS: f64 = 1e-5;
const TRIALS_PER_PRIMITIVE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchCheck {
    pub arch: Arch,
    pub siamese: bool,
    pub max_rel_err: f64,
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    Array::from_vec(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(lo..hi))
            .collect(),
    )
}

/// Max relative error between backprop and central differences for a
/// scalar objective over `params`.
fn check_objective<F>(f: F, params: &ParamSet<f64>) -> f64
where
    F: Fn(&ParamSet<f64>) -> Tensor<f64>,
{
    let analytic: GradMap<f64> = {
        let loss = f(params);
        loss.graph().clone().backprop(&loss, params)
    };
    let scalar_f = |ps: &ParamSet<f64>| f(ps).value().item();
    grad_check(scalar_f, params, &analytic, FD_EPS).expect("finite objective")
}

/// One weighted-mean readout so gradients do not cancel by symmetry.
fn weighted_mean(out: &Tensor<f64>, weights: Array<f64>) -> Tensor<f64> {
    let c = out.graph().constant(weights);
    out.mul(&c).mean()
}

fn primitive_trial(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    let rows = rng.gen_range(2..5usize);
    let cols = rng.gen_range(2..5usize);
    match op {
        "add" | "sub" | "mul" => {
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols], -1.0, 1.0));
            // exercise row broadcasting on half the trials
            let b_shape = if rng.gen_bool(0.5) { vec![rows, cols] } else { vec![1, cols] };
            ps.insert("y", rand_array(rng, &b_shape, -1.0, 1.0));
            let w = rand_array(rng, &[rows, cols], -1.0, 1.0);
            let op = op.to_string();
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    let x = g.param("x", ps.get("x"));
                    let y = g.param("y", ps.get("y"));
                    let out = match op.as_str() {
                        "add" => x.add(&y),
                        "sub" => x.sub(&y),
                        _ => x.mul(&y),
                    };
                    weighted_mean(&out, w.clone())
                },
                &ps,
            )
        }
        "matmul" => {
            let inner = rng.gen_range(2..5usize);
            let mut ps = ParamSet::new();
            ps.insert("a", rand_array(rng, &[rows, inner], -1.0, 1.0));
            ps.insert("b", rand_array(rng, &[inner, cols], -1.0, 1.0));
            let w = rand_array(rng, &[rows, cols], -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    let a = g.param("a", ps.get("a"));
                    let b = g.param("b", ps.get("b"));
                    weighted_mean(&a.matmul(&b), w.clone())
                },
                &ps,
            )
        }
        "sigmoid" | "tanh" | "scale" => {
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols], -2.0, 2.0));
            let w = rand_array(rng, &[rows, cols], -1.0, 1.0);
            let op = op.to_string();
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    let x = g.param("x", ps.get("x"));
                    let out = match op.as_str() {
                        "sigmoid" => x.sigmoid(),
                        "tanh" => x.tanh(),
                        _ => x.scale(1.7, -0.3),
                    };
                    weighted_mean(&out, w.clone())
                },
                &ps,
            )
        }
        "abs" => {
            // keep inputs away from the kink
            let mut data = rand_array(rng, &[rows, cols], 0.2, 1.5);
            for v in data.data_mut().iter_mut() {
                if rng.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            let mut ps = ParamSet::new();
            ps.insert("x", data);
            let w = rand_array(rng, &[rows, cols], -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    weighted_mean(&g.param("x", ps.get("x")).abs(), w.clone())
                },
                &ps,
            )
        }
        "softmax" => {
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols], -2.0, 2.0));
            let axis = rng.gen_range(0..2usize);
            let w = rand_array(rng, &[rows, cols], -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    weighted_mean(&g.param("x", ps.get("x")).softmax(axis), w.clone())
                },
                &ps,
            )
        }
        "sum_axis" => {
            let depth = rng.gen_range(2..4usize);
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols, depth], -1.0, 1.0));
            let axis = rng.gen_range(0..3usize);
            let mut out_shape = vec![rows, cols, depth];
            out_shape.remove(axis);
            let w = rand_array(rng, &out_shape, -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    weighted_mean(&g.param("x", ps.get("x")).sum_axis(axis), w.clone())
                },
                &ps,
            )
        }
        "mean" => {
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols], -1.0, 1.0));
            check_objective(
                |ps| {
                    let g = Graph::new();
                    g.param("x", ps.get("x")).mean()
                },
                &ps,
            )
        }
        "reshape" => {
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols], -1.0, 1.0));
            let w = rand_array(rng, &[rows * cols], -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    let flat = g.param("x", ps.get("x")).reshape(&[rows * cols]);
                    weighted_mean(&flat, w.clone())
                },
                &ps,
            )
        }
        "concat" => {
            let other = rng.gen_range(1..4usize);
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols], -1.0, 1.0));
            ps.insert("y", rand_array(rng, &[rows, other], -1.0, 1.0));
            let w = rand_array(rng, &[rows, cols + other], -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    let x = g.param("x", ps.get("x"));
                    let y = g.param("y", ps.get("y"));
                    weighted_mean(&concat(&[&x, &y], 1), w.clone())
                },
                &ps,
            )
        }
        "slice" => {
            let len = rng.gen_range(1..=cols);
            let start = rng.gen_range(0..=cols - len);
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[rows, cols], -1.0, 1.0));
            let w = rand_array(rng, &[rows, len], -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    weighted_mean(&g.param("x", ps.get("x")).slice(1, start, len), w.clone())
                },
                &ps,
            )
        }
        "conv1d_same" => {
            let steps = rng.gen_range(4..9usize);
            let cin = rng.gen_range(1..4usize);
            let cout = rng.gen_range(1..4usize);
            let k = [1usize, 3, 5, 7][rng.gen_range(0..4)];
            let mut ps = ParamSet::new();
            ps.insert("x", rand_array(rng, &[2, steps, cin], -1.0, 1.0));
            ps.insert("w", rand_array(rng, &[k, cin, cout], -1.0, 1.0));
            let c = rand_array(rng, &[2, steps, cout], -1.0, 1.0);
            check_objective(
                move |ps| {
                    let g = Graph::new();
                    let x = g.param("x", ps.get("x"));
                    let w = g.param("w", ps.get("w"));
                    weighted_mean(&x.conv1d_same(&w), c.clone())
                },
                &ps,
            )
        }
        other => unreachable!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: [&str; 15] = [
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "abs",
    "scale",
    "softmax",
    "sum_axis",
    "mean",
    "reshape",
    "concat",
    "slice",
    "conv1d_same",
];

/// Ten randomized central-difference trials per primitive; returns the
/// worst relative error for each.
pub fn check_primitives(seed: u64) -> Vec<PrimitiveCheck> {
    PRIMITIVES
        .iter()
        .map(|&name| {
            let mut rng = stream(seed, &format!("gradcheck/{name}"));
            let mut worst = 0.0f64;
            for _ in 0..TRIALS_PER_PRIMITIVE {
                worst = worst.max(primitive_trial(name, &mut rng));
            }
            PrimitiveCheck {
                name,
                max_rel_err: worst,
            }
        })
        .collect()
}

fn random_batch(kind: FeatureKind, seq_len: usize, batch: usize, seed: u64) -> Vec<Sample<f64>> {
    let mut rng = stream(seed, "gradcheck/batch");
    (0..batch)
        .map(|_| Sample {
            inputs: rand_array(&mut rng, &[seq_len, kind.width()], -1.0, 1.0),
            // targets sit outside every head's output range so the
            // batch residuals share a sign: an even split makes the
            // true head-bias gradient exactly zero, which the relative
            // error cannot grade against finite-difference noise
            target: rng.gen_range(1.5..2.5),
            day_index: 0,
            anchor: seq_len,
            horizon: 10,
        })
        .collect()
}

/// Central-difference check of the full training loss for one model on
/// a fixed batch, across every parameter coordinate.
pub fn check_model(model: &Model<f64>, samples: &[Sample<f64>]) -> f64 {
    let refs: Vec<&Sample<f64>> = samples.iter().collect();
    let targets = batch_targets(&refs);
    let loss_of = |ps: &ParamSet<f64>| {
        let probe = Model {
            params: ps.clone(),
            ..model.clone()
        };
        let g = Graph::new();
        let preds = probe.forward(&g, &refs);
        let t = g.constant(targets.clone());
        preds.sub(&t).abs().mean()
    };
    let analytic = {
        let loss = loss_of(&model.params);
        loss.graph().clone().backprop(&loss, &model.params)
    };
    grad_check(
        |ps| loss_of(ps).value().item(),
        &model.params,
        &analytic,
        FD_EPS,
    )
    .expect("finite loss")
}

/// Check every architecture, plain and twin-encoder, at reduced size.
pub fn check_architectures(
    sizes: &ModelSizes,
    seq_len: usize,
    batch: usize,
    seed: u64,
) -> Vec<ArchCheck> {
    let kind = FeatureKind::Ofi;
    let samples = random_batch(kind, seq_len, batch, seed);
    let mut out = Vec::new();
    for arch in Arch::ALL {
        for siamese in [false, true] {
            let model = build_model::<f64>(arch, kind, siamese, seq_len, sizes, seed);
            out.push(ArchCheck {
                arch,
                siamese,
                max_rel_err: check_model(&model, &samples),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for check in check_primitives(11) {
            assert!(
                check.max_rel_err < 1e-6,
                "{}: {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn one_small_architecture_end_to_end() {
        let sizes = ModelSizes::reduced(8);
        let samples = random_batch(FeatureKind::Ofi, 5, 2, 3);
        let model = build_model::<f64>(Arch::LstmMha, FeatureKind::Ofi, false, 5, &sizes, 3);
        let err = check_model(&model, &samples);
        assert!(err < 1e-4, "relative error {err}");
    }
}
