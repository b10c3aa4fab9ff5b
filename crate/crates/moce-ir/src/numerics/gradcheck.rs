//! Central-difference gradient oracle.
//!
//! `grad_check` compares a tape-computed gradient against symmetric finite
//! differences of the same scalar function. The suite in
//! [`registered_op_cases`] covers every differentiable op the tape exposes;
//! it backs both the `moce gradcheck` command and the acceptance run.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MoceError, Result};
use crate::numerics::tape::{Tape, TensorId};
use crate::numerics::tensor::Tensor;
use crate::rng;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let out = f(&mut tape, x)?;
        if tape.value(out).len() != 1 {
            return Err(MoceError::Contract(
                "grad_check requires a scalar-valued function".into(),
            ));
        }
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let x = tape.leaf(&point.clone().with_grad());
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(MoceError::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut max_rel: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

/// One differentiable-op check: a point sampler and a scalar-valued wrapper.
pub struct GradCheckCase {
    pub name: &'static str,
    pub sample: Box<dyn Fn(&mut ChaCha8Rng) -> Tensor>,
    pub f: Box<dyn Fn(&mut Tape, TensorId) -> Result<TensorId>>,
}

fn uniform(shape: &'static [usize], lo: f64, hi: f64) -> Box<dyn Fn(&mut ChaCha8Rng) -> Tensor> {
    Box::new(move |rng| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)))
}

/// Deterministic co-input so the wrapped function is identical across
/// finite-difference evaluations.
fn co(tape: &mut Tape, shape: &[usize], tag: u64) -> TensorId {
    let mut r = rng::stream(0xC0, &[tag]);
    let t = Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0));
    tape.constant(shape, t.data().to_vec())
}

/// Contract any op output to a scalar with a fixed random covector.
fn contract(tape: &mut Tape, out: TensorId, tag: u64) -> Result<TensorId> {
    let shape = tape.shape(out).to_vec();
    let w = co(tape, &shape, tag);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

/// Every differentiable op registered on the tape, each probed through a
/// scalar contraction. Ops with several differentiable inputs appear once
/// per input.
pub fn registered_op_cases() -> Vec<GradCheckCase> {
    let mut cases: Vec<GradCheckCase> = Vec::new();
    let mut push = |name: &'static str,
                    sample: Box<dyn Fn(&mut ChaCha8Rng) -> Tensor>,
                    f: Box<dyn Fn(&mut Tape, TensorId) -> Result<TensorId>>| {
        cases.push(GradCheckCase { name, sample, f });
    };

    push(
        "matmul_lhs",
        uniform(&[4, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[5, 3], 1);
            let y = t.matmul(x, b)?;
            contract(t, y, 2)
        }),
    );
    push(
        "matmul_rhs",
        uniform(&[5, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[4, 5], 3);
            let y = t.matmul(a, x)?;
            contract(t, y, 4)
        }),
    );
    push(
        "matmul_batched",
        uniform(&[2, 3, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[2, 4, 2], 5);
            let y = t.matmul(x, b)?;
            contract(t, y, 6)
        }),
    );
    push(
        "linear_input",
        uniform(&[3, 5, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let w = co(t, &[4, 6], 70);
            let b = co(t, &[6], 71);
            let y = t.linear(x, w, b)?;
            contract(t, y, 72)
        }),
    );
    push(
        "linear_weights",
        uniform(&[4, 6], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[3, 5, 4], 73);
            let b = co(t, &[6], 74);
            let y = t.linear(a, x, b)?;
            contract(t, y, 75)
        }),
    );
    push(
        "linear_bias",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[3, 5, 4], 76);
            let w = co(t, &[4, 6], 77);
            let y = t.linear(a, w, x)?;
            contract(t, y, 78)
        }),
    );
    push(
        "matmul_tn_b_lhs",
        uniform(&[5, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[5, 4], 79);
            let y = t.matmul_tn_b(x, b)?;
            contract(t, y, 80)
        }),
    );
    push(
        "matmul_tn_b_rhs",
        uniform(&[5, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[5, 3], 81);
            let y = t.matmul_tn_b(a, x)?;
            contract(t, y, 82)
        }),
    );
    push(
        "matmul_a_bt_lhs",
        uniform(&[5, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[4, 3], 83);
            let y = t.matmul_a_bt(x, b, vec![5, 4])?;
            contract(t, y, 84)
        }),
    );
    push(
        "matmul_a_bt_rhs",
        uniform(&[4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[5, 3], 85);
            let y = t.matmul_a_bt(a, x, vec![5, 4])?;
            contract(t, y, 86)
        }),
    );
    push(
        "conv2d_3x3_input",
        uniform(&[5, 6, 2], -1.0, 1.0),
        Box::new(|t, x| {
            let w = co(t, &[3, 3, 2, 3], 7);
            let b = co(t, &[3], 8);
            let y = t.conv2d_3x3(x, w, b)?;
            contract(t, y, 9)
        }),
    );
    push(
        "conv2d_3x3_weights",
        uniform(&[3, 3, 2, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let img = co(t, &[5, 6, 2], 10);
            let b = co(t, &[3], 11);
            let y = t.conv2d_3x3(img, x, b)?;
            contract(t, y, 12)
        }),
    );
    push(
        "conv2d_3x3_bias",
        uniform(&[3], -1.0, 1.0),
        Box::new(|t, x| {
            let img = co(t, &[5, 6, 2], 13);
            let w = co(t, &[3, 3, 2, 3], 14);
            let y = t.conv2d_3x3(img, w, x)?;
            contract(t, y, 15)
        }),
    );
    push(
        "add",
        uniform(&[7], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[7], 16);
            let y = t.add(x, b)?;
            contract(t, y, 17)
        }),
    );
    push(
        "sub_rhs",
        uniform(&[7], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[7], 18);
            let y = t.sub(a, x)?;
            contract(t, y, 19)
        }),
    );
    push(
        "mul",
        uniform(&[7], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[7], 20);
            let y = t.mul(x, b)?;
            contract(t, y, 21)
        }),
    );
    push(
        "scale",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.scale(x, -1.7);
            contract(t, y, 22)
        }),
    );
    push(
        "add_const",
        uniform(&[5], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.add_const(x, &[0.3, -0.2, 0.9, 0.0, -1.1])?;
            contract(t, y, 23)
        }),
    );
    push(
        "add_row_input",
        uniform(&[3, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[4], 24);
            let y = t.add_row(x, b)?;
            contract(t, y, 25)
        }),
    );
    push(
        "add_row_bias",
        uniform(&[4], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[3, 4], 26);
            let y = t.add_row(a, x)?;
            contract(t, y, 27)
        }),
    );
    push(
        "gelu",
        uniform(&[9], -2.0, 2.0),
        Box::new(|t, x| {
            let y = t.gelu(x);
            contract(t, y, 28)
        }),
    );
    push(
        "abs",
        uniform(&[8], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.abs(x);
            contract(t, y, 29)
        }),
    );
    push(
        "softmax",
        uniform(&[3, 5], -2.0, 2.0),
        Box::new(|t, x| {
            let y = t.softmax(x)?;
            contract(t, y, 30)
        }),
    );
    push(
        "layernorm_input",
        uniform(&[4, 6], -1.0, 1.0),
        Box::new(|t, x| {
            let gm = co(t, &[6], 31);
            let bt = co(t, &[6], 32);
            let y = t.layernorm(x, gm, bt, 1e-6)?;
            contract(t, y, 33)
        }),
    );
    push(
        "layernorm_gamma",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[4, 6], 34);
            let bt = co(t, &[6], 35);
            let y = t.layernorm(a, x, bt, 1e-6)?;
            contract(t, y, 36)
        }),
    );
    push(
        "layernorm_beta",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[4, 6], 37);
            let gm = co(t, &[6], 38);
            let y = t.layernorm(a, gm, x, 1e-6)?;
            contract(t, y, 39)
        }),
    );
    push(
        "mean_all",
        uniform(&[10], -1.0, 1.0),
        Box::new(|t, x| Ok(t.mean_all(x))),
    );
    push(
        "sum_all",
        uniform(&[10], -1.0, 1.0),
        Box::new(|t, x| Ok(t.sum_all(x))),
    );
    push(
        "reshape",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.reshape(x, &[2, 3])?;
            contract(t, y, 40)
        }),
    );
    push(
        "transpose2d",
        uniform(&[4, 5], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.transpose2d(x)?;
            contract(t, y, 41)
        }),
    );
    push(
        "gather_with_repeats",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.gather(x, vec![5, 0, 0, 3, 2, 1, 4, 5], &[8])?;
            contract(t, y, 42)
        }),
    );
    push(
        "window_partition",
        uniform(&[4, 8, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.window_partition(x, 4)?;
            contract(t, y, 60)
        }),
    );
    push(
        "window_merge",
        uniform(&[2, 4, 4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.window_merge(x, 4, 8)?;
            contract(t, y, 61)
        }),
    );
    push(
        "pixel_unshuffle",
        uniform(&[4, 6, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.pixel_unshuffle(x)?;
            contract(t, y, 62)
        }),
    );
    push(
        "pixel_shuffle",
        uniform(&[2, 3, 12], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.pixel_shuffle(x)?;
            contract(t, y, 63)
        }),
    );
    push(
        "concat_last",
        uniform(&[3, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let b = co(t, &[3, 2], 43);
            let y = t.concat_last(x, b)?;
            contract(t, y, 44)
        }),
    );
    push(
        "select",
        uniform(&[7], -1.0, 1.0),
        Box::new(|t, x| t.select(x, 3)),
    );
    push(
        "reduce_max",
        uniform(&[7], -1.0, 1.0),
        Box::new(|t, x| t.reduce_max(x)),
    );
    push(
        "stack_scalars",
        uniform(&[5], -1.0, 1.0),
        Box::new(|t, x| {
            let a = t.select(x, 1)?;
            let b = t.select(x, 4)?;
            let s = t.stack_scalars(&[a, b])?;
            contract(t, s, 45)
        }),
    );
    push(
        "mul_scalar_tensor",
        uniform(&[6], -1.0, 1.0),
        Box::new(|t, x| {
            let s = co(t, &[1], 46);
            let y = t.mul_scalar(x, s)?;
            contract(t, y, 47)
        }),
    );
    push(
        "mul_scalar_scalar",
        uniform(&[1], -1.0, 1.0),
        Box::new(|t, x| {
            let a = co(t, &[6], 48);
            let y = t.mul_scalar(a, x)?;
            contract(t, y, 49)
        }),
    );
    push(
        "normal_cdf",
        uniform(&[7], -2.0, 2.0),
        Box::new(|t, x| {
            let y = t.normal_cdf(x, 2.0);
            contract(t, y, 50)
        }),
    );
    push(
        "spatial_mean",
        uniform(&[4, 4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.spatial_mean(x)?;
            contract(t, y, 51)
        }),
    );
    push(
        "l2_normalize_cols",
        uniform(&[5, 4], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.l2_normalize_cols(x, 1e-12)?;
            contract(t, y, 52)
        }),
    );
    push(
        "circular_corr2d_q",
        uniform(&[2, 4, 4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let k = co(t, &[2, 4, 4, 3], 53);
            let y = t.circular_corr2d(x, k)?;
            contract(t, y, 54)
        }),
    );
    push(
        "circular_corr2d_k",
        uniform(&[2, 4, 4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let q = co(t, &[2, 4, 4, 3], 55);
            let y = t.circular_corr2d(q, x)?;
            contract(t, y, 56)
        }),
    );
    push(
        "standardize_groups",
        uniform(&[24], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.standardize_groups(x, 8, 1e-6)?;
            contract(t, y, 57)
        }),
    );
    push(
        "sobel_descriptor",
        uniform(&[6, 7, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let y = t.sobel_descriptor(x)?;
            contract(t, y, 58)
        }),
    );
    push(
        "cv_squared",
        uniform(&[6], 0.5, 1.5),
        Box::new(|t, x| t.cv_squared(x)),
    );
    push(
        "sqrt",
        uniform(&[6], 0.2, 2.0),
        Box::new(|t, x| {
            let y = t.sqrt(x);
            contract(t, y, 59)
        }),
    );
    push(
        "fourier_l1",
        uniform(&[4, 4, 3], -1.0, 1.0),
        Box::new(|t, x| {
            let mut r = rng::stream(0xC0, &[60]);
            let target = Tensor::from_fn(&[4, 4, 3], |_| r.gen_range(-1.0..1.0));
            t.fourier_l1(x, &target)
        }),
    );

    cases
}

/// Run every case at `points` random points; returns per-op worst error.
pub fn run_suite(points: usize, step: f64, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut results = Vec::new();
    for (ci, case) in registered_op_cases().iter().enumerate() {
        let mut worst: f64 = 0.0;
        for p in 0..points {
            let mut r = rng::stream(seed, &[0x6C, ci as u64, p as u64]);
            let point = (case.sample)(&mut r);
            let err = grad_check(&case.f, &point, step)?;
            worst = worst.max(err);
        }
        results.push((case.name.to_string(), worst));
    }
    Ok(results)
}
