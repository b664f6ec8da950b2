//! Central finite-difference checks of every primitive's backward pass and
//! of whole-network gradients, all in `f64`.
//!
//! Each op check contracts the op output with a random tensor `r` so the
//! scalar `f = sum(r * op(inputs))` has gradient `op_backward(r)`, then
//! compares that with `(f(x + h) - f(x - h)) / 2h` for every input element.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::mix_seed;
use crate::ops::{self, BnAttrs, ConvAttrs, Mode, PoolAttrs, RunningStats};
use crate::sdn::{SdnConfig, SdnModel};
use crate::tensor::{LabelMap, Shape4, Tensor4};

/// Finite-difference step of the op checks.
pub const OP_STEP: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-4;
/// Step and tolerance of the whole-network spot check.
pub const GRAPH_STEP: f64 = 1e-6;
pub const GRAPH_TOLERANCE: f64 = 1e-3;

/// `||a - n|| / max(||a||, ||n||)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn normal(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Numeric gradient of `f` with respect to every element of every input.
fn numeric_grad(
    inputs: &[Tensor4<f64>],
    f: &dyn Fn(&[Tensor4<f64>]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut work = inputs.to_vec();
    for k in 0..work.len() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + OP_STEP;
            let up = f(&work)?;
            work[k].data_mut()[i] = orig - OP_STEP;
            let down = f(&work)?;
            work[k].data_mut()[i] = orig;
            out.push((up - down) / (2.0 * OP_STEP));
        }
    }
    Ok(out)
}

fn compare(
    inputs: &[Tensor4<f64>],
    analytic: Vec<Tensor4<f64>>,
    f: &dyn Fn(&[Tensor4<f64>]) -> Result<f64>,
) -> Result<f64> {
    let a: Vec<f64> = analytic
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(relative_error(&a, &numeric_grad(inputs, f)?))
}

fn conv_case(seed: u64, attrs: ConvAttrs) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        normal(Shape4::new(2, 3, 7, 6), &mut rng),
        normal(Shape4::new(4, 3, 3, 3), &mut rng),
        normal(Shape4::new(1, 4, 1, 1), &mut rng),
    ];
    let y = ops::conv2d(&inputs[0], &inputs[1], Some(&inputs[2]), &attrs)?;
    let r = normal(y.shape(), &mut rng);
    let g = ops::conv2d_backward(&inputs[0], &inputs[1], true, &r, &attrs, true)?;
    let f = |t: &[Tensor4<f64>]| Ok(ops::conv2d(&t[0], &t[1], Some(&t[2]), &attrs)?.dot(&r));
    compare(
        &inputs,
        vec![g.x.expect("requested"), g.w, g.b.expect("with bias")],
        &f,
    )
}

fn conv2d_check(seed: u64) -> Result<f64> {
    let a = conv_case(seed, ConvAttrs::new(1, 1, 1))?;
    let b = conv_case(mix_seed(seed, 1), ConvAttrs::new(2, 1, 1))?;
    Ok(a.max(b))
}

fn conv2d_dilated_check(seed: u64) -> Result<f64> {
    conv_case(seed, ConvAttrs::new(1, 2, 2))
}

fn deconv2d_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attrs = ConvAttrs::new(2, 1, 1);
    let inputs = vec![
        normal(Shape4::new(2, 3, 4, 5), &mut rng),
        normal(Shape4::new(3, 2, 4, 4), &mut rng),
        normal(Shape4::new(1, 2, 1, 1), &mut rng),
    ];
    let y = ops::deconv2d(&inputs[0], &inputs[1], Some(&inputs[2]), &attrs)?;
    let r = normal(y.shape(), &mut rng);
    let g = ops::deconv2d_backward(&inputs[0], &inputs[1], true, &r, &attrs, true)?;
    let f = |t: &[Tensor4<f64>]| Ok(ops::deconv2d(&t[0], &t[1], Some(&t[2]), &attrs)?.dot(&r));
    compare(
        &inputs,
        vec![g.x.expect("requested"), g.w, g.b.expect("with bias")],
        &f,
    )
}

/// Distinct values at least 0.01 apart so no step can reorder a window.
fn spaced(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let mut vals: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * 0.01).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Tensor4::from_vec(shape, vals).expect("length matches")
}

fn maxpool_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attrs = *[PoolAttrs::HALVE, PoolAttrs::new(3, 2, 1)]
        .choose(&mut rng)
        .expect("non-empty");
    let x = spaced(Shape4::new(2, 2, 6, 7), &mut rng);
    let (y, arg) = ops::maxpool2d(&x, &attrs)?;
    let r = normal(y.shape(), &mut rng);
    let gx = ops::maxpool2d_backward(x.shape(), &arg, &r);
    let f = |t: &[Tensor4<f64>]| Ok(ops::maxpool2d(&t[0], &attrs)?.0.dot(&r));
    compare(&[x], vec![gx], &f)
}

fn avgpool_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(Shape4::new(2, 2, 6, 8), &mut rng);
    let y = ops::avgpool2d(&x, &PoolAttrs::HALVE)?;
    let r = normal(y.shape(), &mut rng);
    let gx = ops::avgpool2d_backward(x.shape(), &PoolAttrs::HALVE, &r);
    let f = |t: &[Tensor4<f64>]| Ok(ops::avgpool2d(&t[0], &PoolAttrs::HALVE)?.dot(&r));
    compare(&[x], vec![gx], &f)
}

fn resize_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(Shape4::new(1, 2, 5, 4), &mut rng);
    let (oh, ow) = (rng.random_range(2..12), rng.random_range(2..12));
    let r = normal(Shape4::new(1, 2, oh, ow), &mut rng);
    let gx = ops::bilinear_resize_backward(x.shape(), &r);
    let f = |t: &[Tensor4<f64>]| Ok(ops::bilinear_resize(&t[0], oh, ow).dot(&r));
    compare(&[x], vec![gx], &f)
}

fn batch_norm_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape4::new(3, 4, 3, 2);
    let inputs = vec![
        normal(s, &mut rng),
        normal(Shape4::new(1, 4, 1, 1), &mut rng),
        normal(Shape4::new(1, 4, 1, 1), &mut rng),
    ];
    let attrs = BnAttrs::default();
    let run = |t: &[Tensor4<f64>]| {
        let mut stats = RunningStats::new(4);
        ops::batch_norm(&t[0], &t[1], &t[2], &mut stats, Mode::Train, &attrs)
    };
    let (y, cache) = run(&inputs)?;
    let r = normal(y.shape(), &mut rng);
    let g = ops::batch_norm_backward(&r, &inputs[1], &cache);
    let f = |t: &[Tensor4<f64>]| Ok(run(t)?.0.dot(&r));
    compare(&inputs, vec![g.x, g.gamma, g.beta], &f)
}

fn relu_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep every input at least 0.05 away from the kink.
    let x = Tensor4::from_fn(Shape4::new(2, 3, 4, 4), |_| {
        let m: f64 = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let r = normal(x.shape(), &mut rng);
    let gx = ops::relu_backward(&x, &r);
    let f = |t: &[Tensor4<f64>]| Ok(ops::relu(&t[0]).dot(&r));
    compare(&[x], vec![gx], &f)
}

fn softmax_ce_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape4::new(2, 4, 3, 3);
    let x = normal(s, &mut rng);
    let labels: Vec<u8> = (0..s.n * s.plane())
        .map(|_| {
            if rng.random_bool(0.15) {
                255
            } else {
                rng.random_range(0..4)
            }
        })
        .collect();
    let labels = LabelMap::new(s.n, s.h, s.w, labels)?;
    let (_, g) = ops::softmax_ce_loss(&x, &labels, 255)?;
    let f = |t: &[Tensor4<f64>]| Ok(ops::softmax_ce_loss(&t[0], &labels, 255)?.0);
    compare(&[x], vec![g], &f)
}

type OpCheck = fn(u64) -> Result<f64>;

/// Named op suites run by [`run_op_suites`].
pub const OP_SUITES: [(&str, OpCheck); 9] = [
    ("conv2d", conv2d_check),
    ("conv2d_dilation2", conv2d_dilated_check),
    ("deconv2d", deconv2d_check),
    ("maxpool2d", maxpool_check),
    ("avgpool2d", avgpool_check),
    ("bilinear_resize", resize_check),
    ("batch_norm", batch_norm_check),
    ("relu", relu_check),
    ("softmax_ce_loss", softmax_ce_check),
];

/// Run one suite over `seeds` seeds derived from `base_seed`.
pub fn run_op_suite(
    name: &str,
    check: OpCheck,
    seeds: usize,
    base_seed: u64,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let e = check(mix_seed(base_seed, s as u64))?;
        worst = if e.is_nan() {
            f64::INFINITY
        } else {
            worst.max(e)
        };
    }
    Ok(CheckResult {
        name: name.to_string(),
        seeds,
        worst,
        tolerance: OP_TOLERANCE,
    })
}

pub fn run_op_suites(seeds: usize, base_seed: u64) -> Result<Vec<CheckResult>> {
    OP_SUITES
        .iter()
        .map(|(name, check)| run_op_suite(name, *check, seeds, base_seed))
        .collect()
}

/// Relative error between backprop and central differences of the total
/// loss of a mini network (two units, three classes, 32x32 batch of two)
/// with respect to `samples` randomly chosen scalar weights.
pub fn graph_spot_check(seed: u64, samples: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: SdnModel<f64> = SdnModel::new(SdnConfig::mini(2, 3), seed)?;
    let image = Tensor4::from_fn(Shape4::new(2, 3, 32, 32), |_| rng.random_range(0.0..1.0));
    let labels: Vec<u8> = (0..2 * 32 * 32)
        .map(|_| {
            if rng.random_bool(0.05) {
                255
            } else {
                rng.random_range(0..3)
            }
        })
        .collect();
    let labels = LabelMap::new(2, 32, 32, labels)?;
    let dropout_seed = mix_seed(seed, 7);

    model.net.zero_grad();
    model.forward_losses(&image, &labels, Mode::Train, dropout_seed)?;
    model.backward()?;

    let mut analytic = Vec::with_capacity(samples);
    let mut numeric = Vec::with_capacity(samples);
    for _ in 0..samples {
        let p = rng.random_range(0..model.net.params.len());
        let i = rng.random_range(0..model.net.params[p].value.len());
        analytic.push(model.net.params[p].grad.data()[i]);
        let orig = model.net.params[p].value.data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            model.net.params[p].value.data_mut()[i] = v;
            Ok(model
                .forward_losses(&image, &labels, Mode::Train, dropout_seed)?
                .total)
        };
        let up = eval(orig + GRAPH_STEP)?;
        let down = eval(orig - GRAPH_STEP)?;
        model.net.params[p].value.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * GRAPH_STEP));
    }
    Ok(CheckResult {
        name: "mini_sdn_graph".into(),
        seeds: 1,
        worst: relative_error(&analytic, &numeric),
        tolerance: GRAPH_TOLERANCE,
    })
}
