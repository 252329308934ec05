//! Per-operation value fixtures and central finite-difference checks
//! (h = 1e-5, max relative error < 1e-4, f64).

use rvn_core::gradcheck::{max_rel_err, random_tensor};
use rvn_core::tensor::tape::{stable_sigmoid, Tape, Var};
use rvn_core::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::new(shape, v).unwrap()
}

// ---- conv3d ----

#[test]
fn conv3d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(7, &[1, 3, 3, 3]), false);
    let w = tape.leaf(t(&[1, 1, 1, 1, 1], vec![1.0]), false);
    let b = tape.leaf(t(&[1], vec![0.0]), false);
    let y = tape.conv3d(x, w, b, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn conv3d_counting_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 3, 3, 3], 1.0), false);
    let w = tape.leaf(Tensor::full(&[1, 1, 3, 3, 3], 1.0), false);
    let b = tape.leaf(t(&[1], vec![0.0]), false);
    let y = tape.conv3d(x, w, b, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 27.0);
}

#[test]
fn conv3d_channel_mismatch_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3, 4, 4, 4]), false);
    let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 3, 3]), false);
    let b = tape.leaf(Tensor::zeros(&[4]), false);
    let e = tape.conv3d(x, w, b, [1, 1, 1], [0, 0, 0]);
    assert!(e.is_err());
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let inputs =
        vec![random_tensor(1, &[2, 6, 6, 6]), random_tensor(2, &[4, 2, 3, 3, 3]), random_tensor(3, &[4])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.conv3d(vars[0], vars[1], vars[2], [1, 1, 1], [1, 1, 1]).unwrap();
        let yy = tape.mul(y, y).unwrap();
        tape.mean_all(yy)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

#[test]
fn conv3d_strided_gradients() {
    let inputs =
        vec![random_tensor(4, &[2, 6, 6, 6]), random_tensor(5, &[3, 2, 2, 2, 2]), random_tensor(6, &[3])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.conv3d(vars[0], vars[1], vars[2], [2, 2, 2], [0, 0, 0]).unwrap();
        let yy = tape.mul(y, y).unwrap();
        tape.mean_all(yy)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

// ---- conv_transpose3d ----

#[test]
fn conv_transpose3d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(8, &[1, 4, 4, 4]), false);
    let w = tape.leaf(t(&[1, 1, 1, 1, 1], vec![1.0]), false);
    let b = tape.leaf(t(&[1], vec![0.0]), false);
    let y = tape.conv_transpose3d(x, w, b, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

/// Forward of the transposed conv equals the matrix transpose of the conv's
/// forward map, checked by materializing the dense matrix on a 1x4x4x4 grid.
#[test]
fn conv_transpose3d_is_matrix_transpose_of_conv3d() {
    let w = random_tensor(9, &[1, 1, 2, 2, 2]);
    let n_in = 64; // conv input 4x4x4
    let n_out = 27; // conv output 3x3x3 (k=2, stride 1, pad 0)

    // Dense conv matrix A: column j = conv(e_j).
    let mut a = vec![vec![0.0f64; n_in]; n_out];
    for j in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[j] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4, 4, 4], e), false);
        let wv = tape.leaf(w.clone(), false);
        let b = tape.leaf(t(&[1], vec![0.0]), false);
        let y = tape.conv3d(x, wv, b, [1, 1, 1], [0, 0, 0]).unwrap();
        for (i, row) in a.iter_mut().enumerate() {
            row[j] = tape.value(y).data()[i];
        }
    }
    // Dense transposed-conv matrix B: column i = convT(e_i); want B == A^T.
    for i in 0..n_out {
        let mut e = vec![0.0; n_out];
        e[i] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3, 3, 3], e), false);
        let wv = tape.leaf(w.clone(), false);
        let b = tape.leaf(t(&[1], vec![0.0]), false);
        let y = tape.conv_transpose3d(x, wv, b, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(tape.value(y).numel(), n_in);
        for j in 0..n_in {
            assert!(
                (tape.value(y).data()[j] - a[i][j]).abs() < 1e-12,
                "transpose mismatch at ({i},{j})"
            );
        }
    }
}

#[test]
fn conv_transpose3d_gradients_match_finite_differences() {
    let inputs =
        vec![random_tensor(10, &[3, 3, 3, 3]), random_tensor(11, &[3, 2, 2, 2, 2]), random_tensor(12, &[2])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.conv_transpose3d(vars[0], vars[1], vars[2], [2, 2, 2], [0, 0, 0]).unwrap();
        let yy = tape.mul(y, y).unwrap();
        tape.mean_all(yy)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

/// <conv(x), y> == <x, convT(y)> for the same weights.
#[test]
fn conv_and_transpose_are_adjoint() {
    let w = random_tensor(13, &[2, 3, 3, 3, 3]);
    let x = random_tensor(14, &[3, 5, 5, 5]);
    let y = random_tensor(15, &[2, 5, 5, 5]);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w.clone(), false);
    let b2 = tape.leaf(Tensor::zeros(&[2]), false);
    let cx = tape.conv3d(xv, wv, b2, [1, 1, 1], [1, 1, 1]).unwrap();
    let lhs: f64 =
        tape.value(cx).data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();

    // convT uses weight layout [I, O, k]; the conv weight [O=2, I=3, k] is the
    // transpose map from 2 channels back to 3, so feed it as-is.
    let mut tape2 = Tape::new();
    let yv = tape2.leaf(y, false);
    let wv2 = tape2.leaf(w, false);
    let b3 = tape2.leaf(Tensor::zeros(&[3]), false);
    let cty = tape2.conv_transpose3d(yv, wv2, b3, [1, 1, 1], [1, 1, 1]).unwrap();
    let rhs: f64 =
        tape2.value(cty).data().iter().zip(x.data().iter()).map(|(a, b)| a * b).sum();

    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
}

// ---- conv2d ----

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(16, &[1, 4, 4]), false);
    let w = tape.leaf(t(&[1, 1, 1, 1], vec![1.0]), false);
    let b = tape.leaf(t(&[1], vec![0.0]), false);
    let y = tape.conv2d(x, w, b, [1, 1], [0, 0]).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn conv2d_counting_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 3, 3], 1.0), false);
    let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let b = tape.leaf(t(&[1], vec![0.0]), false);
    let y = tape.conv2d(x, w, b, [1, 1], [0, 0]).unwrap();
    assert_eq!(tape.value(y).item(), 9.0);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let inputs =
        vec![random_tensor(17, &[2, 6, 6]), random_tensor(18, &[3, 2, 3, 3]), random_tensor(19, &[3])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.conv2d(vars[0], vars[1], vars[2], [2, 2], [1, 1]).unwrap();
        let yy = tape.mul(y, y).unwrap();
        tape.mean_all(yy)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

// ---- instance_norm ----

#[test]
fn instance_norm_constant_channel_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 3, 3], 5.0), false);
    let y = tape.instance_norm(x, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn instance_norm_two_point_channel_is_unit() {
    // Channel {-1, 1}: mean 0, var 1; eps -> 0 limit gives back {-1, 1}.
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 2], vec![-1.0, 1.0]), false);
    let y = tape.instance_norm(x, 1e-12).unwrap();
    assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-9);
    assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-9);
}

#[test]
fn instance_norm_gradients_match_finite_differences() {
    let inputs = vec![random_tensor(20, &[2, 3, 3, 3])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.instance_norm(vars[0], 1e-5).unwrap();
        let w = tape.leaf(random_tensor(21, &[2, 3, 3, 3]), false);
        let yw = tape.mul(y, w).unwrap();
        tape.mean_all(yw)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

// ---- elementwise ----

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], vec![-2.0, 0.0, 3.0]), false);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0]);
}

#[test]
fn sigmoid_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], vec![0.0]), false);
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).item(), 0.5);
    assert_eq!(stable_sigmoid(0.0f64), 0.5);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    // Keep relu inputs away from the kink at 0.
    let relu_in = random_tensor(22, &[17]).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let build_relu = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.relu(vars[0]);
        let yy = tape.mul(y, y).unwrap();
        tape.mean_all(yy)
    };
    assert!(max_rel_err(&[relu_in], &build_relu, H, None) < TOL);

    let build_sig = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.sigmoid(vars[0]);
        let yy = tape.mul(y, y).unwrap();
        tape.mean_all(yy)
    };
    assert!(max_rel_err(&[random_tensor(23, &[17])], &build_sig, H, None) < TOL);
}

// ---- linear ----

#[test]
fn linear_identity_and_zero_weight() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], vec![1.0, -2.0, 3.0]), false);
    let eye = tape.leaf(
        t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        false,
    );
    let zb = tape.leaf(Tensor::zeros(&[3]), false);
    let y = tape.linear(x, eye, zb).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let zw = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let b = tape.leaf(t(&[2], vec![0.5, -0.5]), false);
    let y2 = tape.linear(x, zw, b).unwrap();
    assert_eq!(tape.value(y2).data(), &[0.5, -0.5]);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let inputs = vec![random_tensor(24, &[5]), random_tensor(25, &[4, 5]), random_tensor(26, &[4])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.linear(vars[0], vars[1], vars[2]).unwrap();
        let yy = tape.mul(y, y).unwrap();
        tape.mean_all(yy)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

// ---- concat ----

#[test]
fn concat_channel_counts_and_order() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 1, 1, 1], vec![1.0, 2.0]), false);
    let b = tape.leaf(t(&[3, 1, 1, 1], vec![3.0, 4.0, 5.0]), false);
    let y = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[5, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn concat_gradients_split_correctly() {
    let inputs = vec![random_tensor(27, &[2, 2, 2]), random_tensor(28, &[3, 2, 2])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let y = tape.concat_channels(vars[0], vars[1]).unwrap();
        let w = tape.leaf(random_tensor(29, &[5, 2, 2]), false);
        let yw = tape.mul(y, w).unwrap();
        tape.mean_all(yw)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

// ---- losses ----

#[test]
fn bce_fixture_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], vec![0.0]), true);
    let l = tape.bce_with_logits(x, t(&[1], vec![0.5])).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let x2 = tape.leaf(t(&[1], vec![20.0]), true);
    let l2 = tape.bce_with_logits(x2, t(&[1], vec![1.0])).unwrap();
    assert!(tape.value(l2).item() < 1e-8);
}

#[test]
fn bce_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], vec![0.0]), false);
    assert!(tape.bce_with_logits(x, t(&[1], vec![1.5])).is_err());
}

#[test]
fn bce_finite_for_extreme_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[5], vec![-100.0, -37.0, 0.0, 42.0, 100.0]), false);
    let l = tape.bce_with_logits(x, t(&[5], vec![0.0, 1.0, 0.25, 0.5, 1.0])).unwrap();
    assert!(tape.value(l).item().is_finite());
}

#[test]
fn bce_gradients_match_finite_differences() {
    let target = random_tensor(30, &[9]).map(|v| 0.5 + 0.4 * v);
    let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
        tape.bce_with_logits(vars[0], target.clone()).unwrap()
    };
    assert!(max_rel_err(&[random_tensor(31, &[9])], &build, H, None) < TOL);
}

#[test]
fn cross_entropy_fixture_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[8]), false);
    let l = tape.cross_entropy(x, 3).unwrap();
    assert!((tape.value(l).item() - (8.0f64).ln()).abs() < 1e-12);

    let mut hot = vec![0.0; 8];
    hot[2] = 20.0;
    let x2 = tape.leaf(t(&[8], hot), false);
    let l2 = tape.cross_entropy(x2, 2).unwrap();
    assert!(tape.value(l2).item() < 1e-7);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4]), false);
    assert!(tape.cross_entropy(x, 4).is_err());
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let build =
        |tape: &mut Tape<f64>, vars: &[Var]| tape.cross_entropy(vars[0], 1).unwrap();
    assert!(max_rel_err(&[random_tensor(32, &[6])], &build, H, None) < TOL);
}

#[test]
fn huber_branch_values() {
    let mut tape = Tape::new();
    // Delta = 0.
    let p0 = tape.leaf(t(&[1], vec![1.0]), false);
    let l0 = tape.huber(p0, t(&[1], vec![1.0]), 2.0).unwrap();
    assert_eq!(tape.value(l0).item(), 0.0);

    // Delta = 2: both branch formulas give 2 (value continuity).
    let quadratic = 0.5 * 2.0f64 * 2.0;
    let linear = 2.0f64;
    assert_eq!(quadratic, linear);
    let p2 = tape.leaf(t(&[1], vec![2.0]), false);
    let l2 = tape.huber(p2, t(&[1], vec![0.0]), 2.0).unwrap();
    assert_eq!(tape.value(l2).item(), 2.0);

    // Delta = -5: linear branch |delta| = 5.
    let p5 = tape.leaf(t(&[1], vec![-5.0]), false);
    let l5 = tape.huber(p5, t(&[1], vec![0.0]), 2.0).unwrap();
    assert_eq!(tape.value(l5).item(), 5.0);
}

#[test]
fn huber_value_continuity_near_threshold() {
    let mut tape = Tape::new();
    let eps = 1e-9;
    let p_in = tape.leaf(t(&[1], vec![2.0 - eps]), false);
    let l_in = tape.huber(p_in, t(&[1], vec![0.0]), 2.0).unwrap();
    let p_out = tape.leaf(t(&[1], vec![2.0 + eps]), false);
    let l_out = tape.huber(p_out, t(&[1], vec![0.0]), 2.0).unwrap();
    assert!((tape.value(l_in).item() - tape.value(l_out).item()).abs() < 1e-8);
}

#[test]
fn huber_gradients_match_finite_differences() {
    // Stay away from |delta| == 2 where the derivative jumps.
    let pred = random_tensor(33, &[11]).map(|v| v * 1.5);
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        tape.huber(vars[0], Tensor::zeros(&[11]), 2.0).unwrap()
    };
    assert!(max_rel_err(&[pred], &build, H, None) < TOL);
}

// ---- misc op gradients ----

#[test]
fn crop_slice_gather_roi_gradients() {
    let inputs = vec![random_tensor(34, &[3, 4, 4, 4])];
    let build = |tape: &mut Tape<f64>, vars: &[Var]| {
        let c = tape.crop3d(vars[0], [1, 0, 2], [3, 3, 4]).unwrap();
        let s = tape.slice_channels(c, 1, 2).unwrap();
        let r = tape.roi_max_pool(s, [0, 0, 0], [2, 3, 2], [2, 2, 2]).unwrap();
        let f = tape.reshape(r, &[16]).unwrap();
        let g = tape.gather(f, vec![0, 3, 3, 7, 11]).unwrap();
        let gg = tape.mul(g, g).unwrap();
        tape.mean_all(gg)
    };
    assert!(max_rel_err(&inputs, &build, H, None) < TOL);
}

#[test]
fn roi_max_pool_identity_for_exact_bins() {
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(35, &[2, 4, 4, 4]), false);
    let y = tape.roi_max_pool(x, [0, 0, 0], [4, 4, 4], [4, 4, 4]).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

// ---- determinism ----

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(36, &[2, 5, 5, 5]), false);
        let w = tape.leaf(random_tensor(37, &[3, 2, 3, 3, 3]), false);
        let b = tape.leaf(random_tensor(38, &[3]), false);
        let y = tape.conv3d(x, w, b, [1, 1, 1], [1, 1, 1]).unwrap();
        let n = tape.instance_norm(y, 1e-5).unwrap();
        let r = tape.relu(n);
        tape.value(r).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
