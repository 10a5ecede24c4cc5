//! Central finite-difference checks for every differentiable tape op.

use cress_core::rng::{derive_seed_idx, rng_from};
use cress_core::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const SHAPES_PER_OP: usize = 5;

type Build = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
    pub label: String,
}

#[derive(Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    /// Largest per-input relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub worst: f64,
    pub worst_case: String,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, for kinks such as ReLU.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Reduce an op's output to a scalar with fixed random weights.
fn project<'t>(out: Var<'t>, salt: u64) -> Result<Var<'t>> {
    let n = out.with_value(|t| t.numel());
    let mut rng = rng_from(salt);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    out.weighted_sum(&w)
}

fn eval(case: &Case, inputs: &[Tensor], salt: u64) -> f64 {
    let tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    project((case.build)(&tape, &vars).unwrap(), salt).unwrap().item()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error over the inputs of one case.
pub fn check_case(case: &Case, salt: u64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = project((case.build)(&tape, &vars).unwrap(), salt).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; case.inputs[i].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            *slot = (eval(case, &plus, salt) - eval(case, &minus, salt)) / (2.0 * STEP);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        worst = worst.max(rel);
    }
    worst
}

fn case(label: String, inputs: Vec<Tensor>, build: Build) -> Case {
    Case { inputs, build, label }
}

/// `SHAPES_PER_OP` random cases for the named op.
pub fn cases(op: &str, seed: u64) -> Vec<Case> {
    (0..SHAPES_PER_OP as u64)
        .map(|k| {
            let mut r = rng_from(derive_seed_idx(seed, &[k]));
            let rng = &mut r;
            let (m, n) = (dim(rng, 1, 6), dim(rng, 1, 6));
            let label = format!("{op} #{k} ({m}×{n})");
            match op {
                "matmul" => {
                    let p = dim(rng, 1, 6);
                    case(
                        format!("{label} ·{p}"),
                        vec![random(rng, &[m, n]), random(rng, &[n, p])],
                        Box::new(|_, v| v[0].matmul(v[1])),
                    )
                }
                "matmul_t" => {
                    let p = dim(rng, 1, 6);
                    case(
                        format!("{label} ·{p}ᵀ"),
                        vec![random(rng, &[m, n]), random(rng, &[p, n])],
                        Box::new(|_, v| v[0].matmul_t(v[1])),
                    )
                }
                "add" => case(label, vec![random(rng, &[m, n]), random(rng, &[m, n])], Box::new(|_, v| v[0].add(v[1]))),
                "sub" => case(label, vec![random(rng, &[m, n]), random(rng, &[m, n])], Box::new(|_, v| v[0].sub(v[1]))),
                "mul" => case(label, vec![random(rng, &[m, n]), random(rng, &[m, n])], Box::new(|_, v| v[0].mul(v[1]))),
                "add_row" => case(label, vec![random(rng, &[m, n]), random(rng, &[n])], Box::new(|_, v| v[0].add_row(v[1]))),
                "scale" => {
                    let c = rng.random_range(-3.0..3.0);
                    case(label, vec![random(rng, &[m, n])], Box::new(move |_, v| Ok(v[0].scale(c))))
                }
                "relu" => case(label, vec![away_from_zero(rng, &[m, n])], Box::new(|_, v| Ok(v[0].relu()))),
                "softmax" => {
                    let axis = (k % 2) as usize;
                    case(format!("{label} axis {axis}"), vec![random(rng, &[m, n])], Box::new(move |_, v| v[0].softmax(axis)))
                }
                "log_softmax" => {
                    let axis = (k % 2) as usize;
                    case(format!("{label} axis {axis}"), vec![random(rng, &[m, n])], Box::new(move |_, v| v[0].log_softmax(axis)))
                }
                "masked_softmax" => {
                    let mut mask: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.6)).collect();
                    for row in 0..m {
                        mask[row * n + rng.random_range(0..n)] = true;
                    }
                    case(label, vec![random(rng, &[m, n])], Box::new(move |_, v| v[0].masked_softmax(Some(&mask))))
                }
                "layer_norm" => {
                    let n = n.max(2);
                    case(
                        format!("{op} #{k} ({m}×{n})"),
                        vec![random(rng, &[m, n]), random(rng, &[n]), random(rng, &[n])],
                        Box::new(|_, v| v[0].layer_norm(v[1], v[2], 1e-5)),
                    )
                }
                "dropout" => {
                    let s = rng.random::<u64>();
                    case(label, vec![random(rng, &[m, n])], Box::new(move |_, v| Ok(v[0].dropout(0.3, s))))
                }
                "gather_rows" => {
                    let ids: Vec<usize> = (0..dim(rng, 1, 8)).map(|_| rng.random_range(0..m)).collect();
                    case(label, vec![random(rng, &[m, n])], Box::new(move |_, v| v[0].gather_rows(&ids)))
                }
                "unfold" => {
                    let len = dim(rng, 1, 9);
                    let kernel = dim(rng, 1, 5);
                    let stride = dim(rng, 1, 3);
                    let padding = kernel / 2;
                    case(
                        format!("{op} #{k} ({len}×{n}, k{kernel} s{stride} p{padding})"),
                        vec![random(rng, &[len, n])],
                        Box::new(move |_, v| v[0].unfold(kernel, stride, padding)),
                    )
                }
                "slice_cols" => {
                    let start = rng.random_range(0..n);
                    let len = rng.random_range(1..=n - start);
                    case(label, vec![random(rng, &[m, n])], Box::new(move |_, v| v[0].slice_cols(start, len)))
                }
                "concat_cols" => {
                    let p = dim(rng, 1, 4);
                    case(
                        label,
                        vec![random(rng, &[m, n]), random(rng, &[m, p]), random(rng, &[m, 1])],
                        Box::new(|_, v| Var::concat_cols(&v[..3])),
                    )
                }
                "sum" => case(label, vec![random(rng, &[m, n])], Box::new(|_, v| Ok(v[0].sum()))),
                "weighted_sum" => {
                    let w: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..2.0)).collect();
                    case(label, vec![random(rng, &[m, n])], Box::new(move |_, v| v[0].weighted_sum(&w)))
                }
                "smoothed_nll" => {
                    let n = n.max(2);
                    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
                    let eps = [0.0, 0.1, 0.3][k as usize % 3];
                    case(
                        format!("{op} #{k} ({m}×{n}, ε={eps})"),
                        vec![random(rng, &[m, n])],
                        Box::new(move |_, v| v[0].log_softmax(1)?.smoothed_nll(&targets, eps)),
                    )
                }
                "kl_bidirectional_rows" => {
                    let n = n.max(2);
                    case(
                        format!("{op} #{k} ({m}×{n})"),
                        vec![random(rng, &[m, n]), random(rng, &[m, n])],
                        Box::new(|_, v| v[0].log_softmax(1)?.kl_bidirectional_rows(v[1].log_softmax(1)?)),
                    )
                }
                "attention" => {
                    let (q, kk, d) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 4));
                    let mut mask: Vec<bool> = (0..q * kk).map(|_| rng.random_bool(0.7)).collect();
                    for row in 0..q {
                        mask[row * kk + rng.random_range(0..kk)] = true;
                    }
                    case(
                        format!("{op} #{k} (q{q} k{kk} d{d})"),
                        vec![random(rng, &[q, d]), random(rng, &[kk, d]), random(rng, &[kk, d])],
                        Box::new(move |_, v| cress_core::model::scaled_dot_attention(v[0], v[1], v[2], Some(&mask))),
                    )
                }
                other => panic!("no gradient case for `{other}`"),
            }
        })
        .collect()
}

pub const OPS: [&str; 23] = [
    "matmul",
    "matmul_t",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "relu",
    "softmax",
    "log_softmax",
    "masked_softmax",
    "layer_norm",
    "dropout",
    "gather_rows",
    "unfold",
    "slice_cols",
    "concat_cols",
    "sum",
    "weighted_sum",
    "smoothed_nll",
    "kl_bidirectional_rows",
    "attention",
    "matmul",
];

pub fn check_op(op: &'static str, seed: u64) -> OpReport {
    let mut report = OpReport {
        op,
        cases: 0,
        worst: 0.0,
        worst_case: String::new(),
    };
    for (k, c) in cases(op, seed).iter().enumerate() {
        let rel = check_case(c, derive_seed_idx(seed, &[k as u64, 99]));
        report.cases += 1;
        if rel >= report.worst {
            report.worst = rel;
            report.worst_case = c.label.clone();
        }
    }
    report
}

/// Every op, `SHAPES_PER_OP` shapes each.
pub fn check_all(seed: u64) -> Vec<OpReport> {
    let mut seen = std::collections::BTreeSet::new();
    OPS.iter()
        .filter(|op| seen.insert(**op))
        .enumerate()
        .map(|(i, op)| check_op(op, derive_seed_idx(seed, &[i as u64])))
        .collect()
}
