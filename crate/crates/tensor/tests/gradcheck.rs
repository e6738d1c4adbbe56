//! Reverse-mode gradients of every primitive op against central finite
//! differences. The oracle only ever runs forward passes in `f64`.
//!
//! Each case reduces the op output to a scalar through a fixed random
//! projection, `sum(out * r)`, so every output element contributes.
//! Error metric: `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmar_tensor::{Element, Padding, Result, Tape, Tensor, Var};

const FD_STEP: f64 = 1e-3;
const TOL_F64: f64 = 1e-5;
const TOL_F32: f64 = 1e-3;

type Build<T> = fn(&mut Tape<T>, &[Var]) -> Result<Var>;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Values whose pairwise gaps exceed the finite-difference step, so max and
/// relu kinks are never straddled.
fn spread(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| (order[i] as f64 - n as f64 / 2.0 + 0.5) * 0.05).unwrap()
}

fn projected<T: Element>(inputs: &[Tensor<f64>], build: Build<T>, grad: bool) -> (f64, Vec<Tensor<T>>) {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.cast(), grad).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(random(&shape, 999).cast()).unwrap();
    let weighted = tape.mul(out, r).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let value = tape.value(loss).item().as_f64();
    if !grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect())
}

fn numeric(inputs: &[Tensor<f64>], build: Build<f64>) -> Vec<Vec<f64>> {
    inputs
        .iter()
        .enumerate()
        .map(|(which, t)| {
            (0..t.numel())
                .map(|i| {
                    let mut shifted = inputs.to_vec();
                    shifted[which].data_mut()[i] += FD_STEP;
                    let up = projected(&shifted, build, false).0;
                    shifted[which].data_mut()[i] -= 2.0 * FD_STEP;
                    let down = projected(&shifted, build, false).0;
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect()
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, f64_build: Build<f64>, f32_build: Build<f32>) {
    let oracle = numeric(&inputs, f64_build);
    let (_, g64) = projected(&inputs, f64_build, true);
    let (_, g32) = projected(&inputs, f32_build, true);
    for (i, expected) in oracle.iter().enumerate() {
        assert!(expected.iter().any(|v| v.abs() > 1e-9), "{name}: input {i} has an all-zero oracle gradient");
        let e64 = rel_err(g64[i].data(), expected);
        let a32: Vec<f64> = g32[i].data().iter().map(|&v| v as f64).collect();
        let e32 = rel_err(&a32, expected);
        assert!(e64 < TOL_F64, "{name}: input {i} f64 rel err {e64:e}");
        assert!(e32 < TOL_F32, "{name}: input {i} f32 rel err {e32:e}");
    }
}

macro_rules! case {
    ($name:ident, |$tape:ident, $v:ident| $body:expr) => {
        fn $name<T: Element>($tape: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
            $body
        }
    };
}

case!(add, |t, v| t.add(v[0], v[1]));
case!(mul, |t, v| t.mul(v[0], v[1]));
case!(add_broadcast, |t, v| t.add_broadcast(v[0], v[1]));
case!(scale, |t, v| t.scale(v[0], -1.7));
case!(matmul_shared, |t, v| t.matmul(v[0], v[1]));
case!(matmul_batched, |t, v| t.matmul(v[0], v[1]));
case!(dense, |t, v| t.dense(v[0], v[1], Some(v[2])));
case!(conv_valid, |t, v| t.conv2d(v[0], v[1], 1, Padding::Valid));
case!(conv_same_stride2, |t, v| t.conv2d(v[0], v[1], 2, Padding::Same));
case!(maxpool, |t, v| t.maxpool2d(v[0], 2));
case!(relu, |t, v| t.relu(v[0]));
case!(tanh, |t, v| t.tanh(v[0]));
case!(layernorm, |t, v| t.layernorm(v[0], v[1], v[2], 1e-5));
case!(softmax_last, |t, v| t.softmax(v[0], 2));
case!(softmax_middle, |t, v| t.softmax(v[0], 1));
case!(log_softmax, |t, v| t.log_softmax(v[0], 1));
case!(mean, |t, v| t.mean(v[0]));
case!(sum, |t, v| t.sum(v[0]));
case!(max_over_indices, |t, v| t.max_over_indices(v[0], &[vec![0, 3], vec![5, 1, 2], vec![4]]));
case!(mean_over_indices, |t, v| t.mean_over_indices(v[0], &[vec![0, 3], vec![5, 1, 2]]));
case!(clip, |t, v| t.clip(v[0], -0.5, 0.5));
case!(clip_around, |t, v| {
    let center = t.constant(Tensor::from_fn(vec![4], |i| [0.3, -0.4, 0.0, 0.6][i]).unwrap().cast())?;
    t.clip_around(v[0], center, 0.5)
});
case!(gather_rows, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]));
case!(reshape, |t, v| t.reshape(v[0], &[4, 6]));
case!(permute, |t, v| t.permute(v[0], &[2, 0, 3, 1]));
case!(concat, |t, v| t.concat(&[v[0], v[1]], 1));
case!(cross_entropy, |t, v| t.cross_entropy(v[0], &[2, 0, 4]));

case!(composite, |t, v| {
    let c = t.conv2d(v[0], v[1], 1, Padding::Valid)?;
    let c = t.add_broadcast(c, v[4])?;
    let h = t.tanh(c)?;
    let flat = t.reshape(h, &[2, 2 * 2 * 2])?;
    t.dense(flat, v[2], Some(v[3]))
});

#[test]
fn elementwise_ops() {
    check("add", vec![random(&[2, 3, 4], 1), random(&[2, 3, 4], 2)], add::<f64>, add::<f32>);
    check("mul", vec![random(&[2, 3, 4], 3), random(&[2, 3, 4], 4)], mul::<f64>, mul::<f32>);
    check(
        "add_broadcast",
        vec![random(&[2, 3, 4], 5), random(&[3, 4], 6)],
        add_broadcast::<f64>,
        add_broadcast::<f32>,
    );
    check("scale", vec![random(&[4, 4], 7)], scale::<f64>, scale::<f32>);
    check("relu", vec![spread(&[3, 4], 8)], relu::<f64>, relu::<f32>);
    check("tanh", vec![random(&[3, 4], 9)], tanh::<f64>, tanh::<f32>);
    check("clip", vec![spread(&[4, 4], 10)], clip::<f64>, clip::<f32>);
    check("clip_around", vec![spread(&[3, 4], 45)], clip_around::<f64>, clip_around::<f32>);
}

#[test]
fn linear_algebra_ops() {
    check(
        "matmul shared",
        vec![random(&[2, 3, 4], 11), random(&[4, 2], 12)],
        matmul_shared::<f64>,
        matmul_shared::<f32>,
    );
    check(
        "matmul batched",
        vec![random(&[2, 3, 4], 13), random(&[2, 4, 3], 14)],
        matmul_batched::<f64>,
        matmul_batched::<f32>,
    );
    check(
        "dense",
        vec![random(&[2, 3, 4], 15), random(&[4, 3], 16), random(&[3], 17)],
        dense::<f64>,
        dense::<f32>,
    );
}

#[test]
fn spatial_ops() {
    check(
        "conv2d valid",
        vec![random(&[2, 4, 4, 3], 18), random(&[3, 3, 3, 2], 19)],
        conv_valid::<f64>,
        conv_valid::<f32>,
    );
    check(
        "conv2d same stride 2",
        vec![random(&[2, 4, 4, 2], 20), random(&[3, 3, 2, 3], 21)],
        conv_same_stride2::<f64>,
        conv_same_stride2::<f32>,
    );
    check("maxpool2d", vec![spread(&[2, 4, 4, 2], 22)], maxpool::<f64>, maxpool::<f32>);
}

#[test]
fn normalization_ops() {
    check(
        "layernorm",
        vec![random(&[3, 4], 23), random(&[4], 24), random(&[4], 25)],
        layernorm::<f64>,
        layernorm::<f32>,
    );
    check("softmax last axis", vec![random(&[2, 3, 4], 26)], softmax_last::<f64>, softmax_last::<f32>);
    check("softmax middle axis", vec![random(&[2, 3, 4], 27)], softmax_middle::<f64>, softmax_middle::<f32>);
    check("log_softmax", vec![random(&[3, 4], 28)], log_softmax::<f64>, log_softmax::<f32>);
}

#[test]
fn reduction_ops() {
    check("mean", vec![random(&[3, 4], 29)], mean::<f64>, mean::<f32>);
    check("sum", vec![random(&[3, 4], 30)], sum::<f64>, sum::<f32>);
    check(
        "max_over_indices",
        vec![spread(&[3, 6], 31)],
        max_over_indices::<f64>,
        max_over_indices::<f32>,
    );
    check(
        "mean_over_indices",
        vec![random(&[3, 6], 32)],
        mean_over_indices::<f64>,
        mean_over_indices::<f32>,
    );
    check("cross_entropy", vec![random(&[3, 5], 33)], cross_entropy::<f64>, cross_entropy::<f32>);
}

#[test]
fn structural_ops() {
    check("gather_rows", vec![random(&[4, 2, 3], 34)], gather_rows::<f64>, gather_rows::<f32>);
    check("reshape", vec![random(&[2, 3, 4], 35)], reshape::<f64>, reshape::<f32>);
    check("permute", vec![random(&[2, 3, 4, 2], 36)], permute::<f64>, permute::<f32>);
    check(
        "concat",
        vec![random(&[2, 3, 4], 37), random(&[2, 1, 4], 38)],
        concat::<f64>,
        concat::<f32>,
    );
}

#[test]
fn conv_tanh_dense_composite() {
    // Input, conv kernel, conv bias, dense weight and dense bias all receive
    // gradients through conv2d -> tanh -> dense.
    check(
        "composite",
        vec![
            random(&[2, 4, 4, 2], 40),
            random(&[3, 3, 2, 2], 41),
            random(&[8, 3], 42),
            random(&[3], 43),
            random(&[2], 44),
        ],
        composite::<f64>,
        composite::<f32>,
    );
}
