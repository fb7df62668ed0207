//! Central finite-difference oracle for tape gradients.
//!
//! Perturbations are applied in `f32` storage, and the step actually realised
//! (`(x + eps) - x` after rounding) is measured in `f64` so representation
//! error in the step does not masquerade as gradient error. The function
//! value is read through [`Tape::scalar_f64`], so a final reduction is not
//! rounded to `f32` before differencing.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{OpAttrs, OpKind};
use super::param::ParamStore;
use super::tape::{BatchNormMode, FlipAxis, Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Up to `max` coordinate indices spread evenly over `0..n`.
fn sample_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|i| i * n / max).collect();
    out.dedup();
    out
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.scalar_f64(v)
}

fn central_difference(data: &mut [f32], idx: usize, eps: f32, mut eval: impl FnMut(&[f32]) -> Result<f64>) -> Result<f64> {
    let orig = data[idx];
    let plus = orig + eps;
    let minus = orig - eps;
    data[idx] = plus;
    let fp = eval(data)?;
    data[idx] = minus;
    let fm = eval(data)?;
    data[idx] = orig;
    let step = plus as f64 - minus as f64;
    Ok((fp - fm) / step)
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every input
/// tensor. Returns the largest relative error over the sampled coordinates.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], eps: f32, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf requires grad");
        for idx in sample_coords(inputs[k].numel(), max_coords) {
            let mut data = work[k].data().to_vec();
            let numeric = central_difference(&mut data, idx, eps, |d| {
                work[k] = Tensor::new(inputs[k].shape().to_vec(), d.to_vec())?;
                eval(&work)
            })?;
            work[k] = inputs[k].clone();
            let e = relative_error(analytic.data()[idx] as f64, numeric);
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Outcome of a parameter-space gradient check.
#[derive(Clone, Debug, Default)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
}

/// Same check with respect to the parameters of a model whose name passes
/// `include`. `f` receives a fresh tape and a scratch copy of the store; it
/// must not depend on state it mutates.
pub fn finite_difference_check_params<F>(
    f: F,
    store: &ParamStore,
    eps: f32,
    max_coords: usize,
    include: impl Fn(&str) -> bool,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let mut scratch = store.clone();
    let mut tape = Tape::new();
    let out = f(&mut tape, &mut scratch)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = ParamCheckReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.param(id).name.clone();
        if !include(&name) {
            continue;
        }
        let Some(analytic) = grads.param(id).map(|g| g.to_vec()) else {
            continue;
        };
        let shape = store.param(id).value.shape().to_vec();
        for idx in sample_coords(analytic.len(), max_coords) {
            let mut data = store.param(id).value.data().to_vec();
            let numeric = central_difference(&mut data, idx, eps, |d| {
                let mut s = store.clone();
                s.param_mut(id).value = Tensor::new(shape.clone(), d.to_vec())?;
                let mut t = Tape::new();
                let out = f(&mut t, &mut s)?;
                scalar_of(&t, out)
            })?;
            let a = analytic[idx] as f64;
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Directional variant for whole models. Each included parameter tensor is
/// moved by `±step` along a unit direction that mixes its analytic gradient
/// with a seeded random direction, and `f(θ+) - f(θ-)` is compared with the
/// analytic prediction `g · (θ+ - θ-)`. The step starts at `eps` and is
/// halved (at most [`STEP_HALVINGS`] times) until both evaluations take the
/// same relu/pooling branches as the unperturbed pass, so the difference never
/// straddles a kink. One comparison per tensor: the report's coordinate is
/// always 0 and `coords_checked` counts tensors.
pub const STEP_HALVINGS: usize = 6;

pub fn finite_difference_check_directional<F>(
    f: F,
    store: &ParamStore,
    eps: f32,
    seed: u64,
    include: impl Fn(&str) -> bool,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let mut scratch = store.clone();
    let mut tape = Tape::new();
    let out = f(&mut tape, &mut scratch)?;
    scalar_of(&tape, out)?;
    let pattern = tape.activation_pattern();
    let grads = tape.backward(out)?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);

    let mut report = ParamCheckReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.param(id).name.clone();
        if !include(&name) {
            continue;
        }
        let Some(g) = grads.param(id).map(|g| g.to_vec()) else {
            continue;
        };
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let gu = unit(g.iter().map(|&x| x as f64).collect());
        let ru = unit((0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let dir = unit(gu.iter().zip(&ru).map(|(a, b)| a + b).collect());

        let base = store.param(id).value.clone();
        let shifted = |step: f64| -> Result<(f64, Vec<f64>, u64)> {
            let data: Vec<f32> = base.data().iter().zip(&dir).map(|(&x, &d)| (x as f64 + step * d) as f32).collect();
            let realised = data.iter().map(|&x| x as f64).collect();
            let mut s = store.clone();
            s.param_mut(id).value = Tensor::new(base.shape().to_vec(), data)?;
            let mut t = Tape::new();
            let out = f(&mut t, &mut s)?;
            Ok((scalar_of(&t, out)?, realised, t.activation_pattern()))
        };
        let mut step = eps as f64;
        let (fp, xp, fm, xm) = loop {
            let (fp, xp, pp) = shifted(step)?;
            let (fm, xm, pm) = shifted(-step)?;
            if (pp == pattern && pm == pattern) || step <= eps as f64 / (1 << STEP_HALVINGS) as f64 {
                break (fp, xp, fm, xm);
            }
            step /= 2.0;
        };
        let predicted: f64 = g.iter().zip(xp.iter().zip(&xm)).map(|(&gi, (p, m))| gi as f64 * (p - m)).sum();
        let err = relative_error(predicted, fp - fm);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name, 0, predicted, fp - fm));
        }
    }
    Ok(report)
}

/// Tolerance for ops whose central difference is exact up to rounding
/// (piecewise multilinear, evaluated away from kinks).
pub const EXACT_TOL: f64 = 1e-4;
/// Tolerance for smooth nonlinear ops.
pub const SMOOTH_TOL: f64 = 1e-2;

/// Result of checking one random instance of one op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub kind: OpKind,
    pub variant: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Multiples of 1/8 in `[-1, 1]`. Sums of products of these stay exact in
/// `f32`, so linear ops difference without rounding.
fn dyadic(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-8i32..=8) as f32 / 8.0)
}

/// Nonzero multiples of 1/8 in `[-1, 1]`.
fn dyadic_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let k = rng.gen_range(1i32..=8) as f32 / 8.0;
        if rng.gen_bool(0.5) {
            k
        } else {
            -k
        }
    })
}

/// Distinct multiples of 1/8 in random order.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - (n / 2) as f32) / 8.0).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("positive extents")
}

/// Checks `sum(r * op(inputs))` for a fixed random `r`, with respect to
/// every input. `r` is dyadic for exact ops.
fn check_kind(kind: OpKind, inputs: Vec<Tensor>, attrs: OpAttrs, eps: f32, smooth: bool, rng: &mut impl Rng) -> Result<f64> {
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = t.forward_op(kind, &vars, &attrs)?;
        t.value(out).shape().to_vec()
    };
    let r = if smooth {
        uniform(rng, &probe, -1.0, 1.0)
    } else {
        dyadic(rng, &probe)
    };
    finite_difference_check(
        |tape, xs| {
            let y = tape.forward_op(kind, xs, &attrs)?;
            let rv = tape.constant(r.clone());
            tape.dot(y, rv)
        },
        &inputs,
        eps,
        64,
    )
}

/// One random instance per differentiable op kind (two for batch norm).
pub fn op_gradient_suite(rng: &mut ChaCha8Rng) -> Result<Vec<OpCheck>> {
    // exact ops: dyadic data, kinks at least 1/8 away from a 1/64 step
    const COARSE: f32 = 1.0 / 64.0;
    const SMOOTH: f32 = 3e-3;
    let mut out = Vec::new();
    let mut run = |kind: OpKind, variant: &'static str, inputs: Vec<Tensor>, attrs: OpAttrs, smooth: bool, rng: &mut ChaCha8Rng| -> Result<()> {
        let (eps, tolerance) = if smooth { (SMOOTH, SMOOTH_TOL) } else { (COARSE, EXACT_TOL) };
        let max_rel_error = check_kind(kind, inputs, attrs, eps, smooth, rng)?;
        out.push(OpCheck {
            kind,
            variant,
            max_rel_error,
            tolerance,
        });
        Ok(())
    };
    let d = OpAttrs::default;
    for kind in OpKind::ALL {
        if !kind.is_differentiable() {
            continue;
        }
        let u = |rng: &mut ChaCha8Rng, shape: &[usize]| dyadic(rng, shape);
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (u(rng, &[3, 4]), u(rng, &[3, 4]));
                run(kind, "", vec![a, b], d(), false, rng)?;
            }
            OpKind::Max => {
                let a = u(rng, &[3, 4]);
                let gap = dyadic_away_from_zero(rng, &[3, 4]);
                let b = Tensor::new([3, 4], a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect())?;
                run(kind, "", vec![a, b], d(), false, rng)?;
            }
            OpKind::ScalarMul => {
                let scalar = rng.gen_range(-16i32..=16) as f32 / 8.0;
                let a = u(rng, &[5]);
                run(kind, "", vec![a], OpAttrs { scalar, ..d() }, false, rng)?;
            }
            OpKind::MatMul => {
                let (a, b) = (u(rng, &[3, 4]), u(rng, &[4, 5]));
                run(kind, "", vec![a, b], d(), false, rng)?;
            }
            OpKind::Conv2d => {
                let stride = rng.gen_range(1..=2);
                let padding = rng.gen_range(0..=1);
                let (x, w) = (u(rng, &[2, 3, 6, 5]), u(rng, &[4, 3, 3, 3]));
                run(kind, "", vec![x, w], OpAttrs { stride, padding, ..d() }, false, rng)?;
            }
            OpKind::BatchNorm => {
                let (x, b) = (uniform(rng, &[4, 3, 2, 2], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0));
                let g = uniform(rng, &[3], 0.5, 1.5);
                run(kind, "train", vec![x, g, b], d(), true, rng)?;
                // variances of 4^k - eps make the inverse std a power of two
                let (x, g, b) = (u(rng, &[4, 3, 2, 2]), u(rng, &[3]), u(rng, &[3]));
                let mean = dyadic(rng, &[3]).into_data();
                let var = (0..3).map(|_| (4f64.powi(rng.gen_range(-1..=1)) - 1e-5) as f32).collect();
                let bn_mode = BatchNormMode::Eval { mean, var };
                run(kind, "eval", vec![x, g, b], OpAttrs { bn_mode, ..d() }, false, rng)?;
            }
            OpKind::Relu | OpKind::Abs => {
                let a = dyadic_away_from_zero(rng, &[3, 5]);
                run(kind, "", vec![a], d(), false, rng)?;
            }
            OpKind::BilinearUpsample | OpKind::UpsampleNearest => {
                let factor = if rng.gen_bool(0.5) { 2 } else { 4 };
                let a = u(rng, &[1, 2, 3, 3]);
                run(kind, "", vec![a], OpAttrs { factor, ..d() }, false, rng)?;
            }
            OpKind::SpatialMean | OpKind::Sum | OpKind::Mean => {
                let a = u(rng, &[2, 3, 4, 4]);
                run(kind, "", vec![a], d(), false, rng)?;
            }
            OpKind::MaskedSpatialMean => {
                let a = u(rng, &[2, 3, 4, 4]);
                let mask = Tensor::from_fn([2, 4, 4], |_| rng.gen_bool(0.5) as u8 as f32);
                run(kind, "", vec![a], OpAttrs { mask: Some(mask), ..d() }, false, rng)?;
            }
            OpKind::L2Norm => {
                let a = uniform(rng, &[3, 5], -1.0, 1.0);
                run(kind, "", vec![a], d(), true, rng)?;
            }
            OpKind::Dot => {
                let (a, b) = (u(rng, &[6]), u(rng, &[6]));
                run(kind, "", vec![a, b], d(), false, rng)?;
            }
            OpKind::CosineSimilarity => {
                let (a, b) = (uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[3, 5], -1.0, 1.0));
                run(kind, "", vec![a, b], d(), true, rng)?;
            }
            OpKind::Flip => {
                let flip = if rng.gen_bool(0.5) { FlipAxis::Horizontal } else { FlipAxis::Vertical };
                let a = u(rng, &[2, 3, 4]);
                run(kind, "", vec![a], OpAttrs { flip, ..d() }, false, rng)?;
            }
            OpKind::Concat => {
                let axis = rng.gen_range(0..3);
                let mut shape = vec![2, 3, 2];
                let a = u(rng, &shape);
                shape[axis] += 1;
                let b = u(rng, &shape);
                run(kind, "", vec![a, b], OpAttrs { axis, ..d() }, false, rng)?;
            }
            OpKind::AddBias => {
                let (x, b) = (u(rng, &[2, 3, 2, 2]), u(rng, &[3]));
                run(kind, "", vec![x, b], d(), false, rng)?;
            }
            OpKind::MaxPool2d => {
                let a = distinct(rng, &[1, 2, 5, 5]);
                let attrs = OpAttrs {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    ..d()
                };
                run(kind, "", vec![a], attrs, false, rng)?;
            }
            OpKind::Select => {
                let a = u(rng, &[4, 3]);
                let indices = (0..5).map(|_| rng.gen_range(0..4)).collect();
                run(kind, "", vec![a], OpAttrs { indices, ..d() }, false, rng)?;
            }
            OpKind::Reshape => {
                let a = u(rng, &[2, 6]);
                run(kind, "", vec![a], OpAttrs { shape: vec![3, 4], ..d() }, false, rng)?;
            }
            OpKind::SoftmaxCrossEntropy => {
                let a = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
                let labels = (0..8).map(|_| rng.gen_range(0..3u8)).collect();
                let class_weights = rng.gen_bool(0.5).then(|| vec![0.5, 1.0, 2.0]);
                let attrs = OpAttrs {
                    labels,
                    class_weights,
                    ..d()
                };
                run(kind, "", vec![a], attrs, true, rng)?;
            }
            OpKind::NearestResize | OpKind::StopGradient => unreachable!("not differentiable"),
        }
    }
    Ok(out)
}
