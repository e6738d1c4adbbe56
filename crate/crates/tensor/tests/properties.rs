use proptest::prelude::*;
use xmar_tensor::{Padding, Tape, Tensor};

fn vec_tensor(values: Vec<f32>) -> Tensor<f32> {
    let n = values.len();
    Tensor::new(vec![n], values).unwrap()
}

proptest! {
    #[test]
    fn clip_stays_in_range_and_fixes_interior(values in prop::collection::vec(-5.0f32..5.0, 1..64)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec_tensor(values.clone())).unwrap();
        let y = tape.clip(x, -1.0, 1.0).unwrap();
        for (&v, &c) in values.iter().zip(tape.value(y).data()) {
            prop_assert!((-1.0..=1.0).contains(&c));
            if (-1.0..=1.0).contains(&v) {
                prop_assert_eq!(v, c);
            }
        }
    }

    #[test]
    fn clip_around_bound_is_exact(
        pairs in prop::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 1..64),
        radius in prop::sample::select(vec![0.0, 0.05, 0.1, 0.3, 0.5, 1.0]),
    ) {
        let (center, delta): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(vec_tensor(center.clone())).unwrap();
        let d = tape.constant(vec_tensor(delta)).unwrap();
        let d = tape.scale(d, radius).unwrap();
        let x = tape.add(c, d).unwrap();
        let y = tape.clip_around(x, c, radius).unwrap();
        for (&out, &c) in tape.value(y).data().iter().zip(&center) {
            prop_assert!((out as f64 - c as f64).abs() <= radius, "{out} vs {c} radius {radius}");
        }
    }

    #[test]
    fn softmax_normalizes_and_ignores_shift(
        values in prop::collection::vec(-10.0f32..10.0, 2..32),
        shift in -50.0f32..50.0,
    ) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec_tensor(values.clone())).unwrap();
        let shifted: Vec<f32> = values.iter().map(|v| v + shift).collect();
        let xs = tape.constant(vec_tensor(shifted)).unwrap();
        let p = tape.softmax(x, 0).unwrap();
        let ps = tape.softmax(xs, 0).unwrap();
        let total: f64 = tape.value(p).data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6, "sum {total}");
        let diff = tape.value(p).max_abs_diff(tape.value(ps)).unwrap();
        prop_assert!(diff <= 1e-6, "shift changed softmax by {diff}");
    }
}

fn conv_forward(seed: u64) -> Vec<f32> {
    let image = Tensor::from_fn(vec![3, 8, 8, 2], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 500.0 - 1.0).unwrap();
    let kernel = Tensor::from_fn(vec![3, 3, 2, 4], |i| ((i as u64 * 40503 + seed) % 97) as f32 / 48.0 - 1.0).unwrap();
    let mut tape = Tape::<f32>::new();
    let x = tape.param(image).unwrap();
    let w = tape.param(kernel).unwrap();
    let c = tape.conv2d(x, w, 1, Padding::Same).unwrap();
    let t = tape.tanh(c).unwrap();
    let loss = tape.mean(t).unwrap();
    let mut out = tape.value(t).data().to_vec();
    let grads = tape.backward(loss).unwrap();
    out.extend_from_slice(grads.get(w).unwrap().data());
    out.extend_from_slice(grads.get(x).unwrap().data());
    out
}

#[test]
fn same_inputs_give_bit_identical_results() {
    let a = conv_forward(11);
    let b = conv_forward(11);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn thread_count_does_not_change_reductions() {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = single.install(|| conv_forward(3));
    let b = many.install(|| conv_forward(3));
    assert_eq!(a, b);
}
