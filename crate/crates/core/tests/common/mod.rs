#![allow(dead_code)]

pub mod grad_suite;

use moab::tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradient norms below this are compared absolutely.
const NORM_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(rng, n, scale)).unwrap()
}

/// Draws whose magnitude is at least `min_abs`.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], min_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = min_abs + rng.random::<f64>();
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Reference outer operator written as two nested scalar loops over the
/// padded vectors.
pub fn outer_oracle(a: &[f64], b: &[f64], op: OracleOp, eps: f64) -> Vec<Vec<f64>> {
    let pad = match op {
        OracleOp::Add | OracleOp::Sub => 0.0,
        OracleOp::Mul | OracleOp::Div => 1.0,
    };
    let mut ap = vec![pad];
    ap.extend_from_slice(a);
    let mut bp = vec![pad];
    bp.extend_from_slice(b);
    let mut out = vec![vec![0.0; bp.len()]; ap.len()];
    for i in 0..ap.len() {
        for j in 0..bp.len() {
            out[i][j] = match op {
                OracleOp::Add => ap[i] + bp[j],
                OracleOp::Sub => ap[i] - bp[j],
                OracleOp::Mul => ap[i] * bp[j],
                OracleOp::Div => ap[i] / (bp[j] + eps),
            };
        }
    }
    out
}

/// Builds a graph from input tensors. Returns the output and the leaves
/// standing for each input, in input order.
pub type Build<'a> = dyn Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>) + 'a;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn projection(shape: &[usize]) -> Tensor {
    let mut r = rng(0x5eed);
    normal(&mut r, shape, 1.0)
}

/// Scalar objective `sum(out ⊙ W)` with a fixed random `W`, so every output
/// entry contributes with its own weight.
fn objective(g: &mut Graph, out: Var) -> Var {
    let w = g.constant(projection(g.shape(out)));
    let weighted = g.mul(out, w).unwrap();
    g.sum(weighted)
}

fn evaluate(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (out, _) = build(&mut g, inputs);
    let loss = objective(&mut g, out);
    g.value(loss).data()[0]
}

/// Central-difference check of the analytic gradient of `build` with
/// respect to every input. At most `max_coords` coordinates per input are
/// probed (all of them when the input is smaller). The error for one input
/// is `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, floor)`.
pub fn gradcheck(
    build: &Build,
    inputs: &[Tensor],
    max_coords: usize,
    seed: u64,
) -> Result<GradReport, String> {
    let mut g = Graph::new();
    let (out, leaves) = build(&mut g, inputs);
    assert_eq!(leaves.len(), inputs.len(), "one leaf per input");
    let loss = objective(&mut g, out);
    g.backward(loss).map_err(|e| e.to_string())?;

    let mut r = rng(seed);
    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for (k, (input, &leaf)) in inputs.iter().zip(&leaves).enumerate() {
        let analytic = g
            .grad(leaf)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            rand::seq::index::sample(&mut r, input.len(), max_coords).into_vec()
        };
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for &c in &coords {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[c] = input.data()[c] + FD_STEP;
            let up = evaluate(build, &shifted);
            shifted[k].data_mut()[c] = input.data()[c] - FD_STEP;
            let down = evaluate(build, &shifted);
            let numeric = (up - down) / (2.0 * FD_STEP);
            diff2 += (analytic[c] - numeric).powi(2);
            an2 += analytic[c].powi(2);
            nu2 += numeric.powi(2);
        }
        let rel = diff2.sqrt() / an2.sqrt().max(nu2.sqrt()).max(NORM_FLOOR);
        if !rel.is_finite() {
            return Err(format!("input {k}: non-finite gradient error"));
        }
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += coords.len();
    }
    Ok(report)
}

/// Inputs first, then every parameter of `store`, as one flat list suitable
/// for [`gradcheck`].
pub fn with_params(inputs: Vec<Tensor>, store: &ParamStore) -> Vec<Tensor> {
    let mut all = inputs;
    all.extend(store.iter().map(|p| p.value.clone()));
    all
}

/// Binds a copy of `store` whose values are taken from `tensors[offset..]`.
pub fn bind_from(
    g: &mut Graph,
    store: &ParamStore,
    tensors: &[Tensor],
    offset: usize,
) -> (moab::tensor::Bound, Vec<Var>) {
    let mut copy = store.clone();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (name, t) in names.iter().zip(&tensors[offset..]) {
        let id = copy.id(name).unwrap();
        copy.set(id, t.clone()).unwrap();
    }
    let bound = copy.bind(g);
    let vars = names.iter().map(|n| bound.var(copy.id(n).unwrap())).collect();
    (bound, vars)
}
