use hvslu::autodiff::gradcheck::check_params;
use hvslu::autodiff::{
    AutodiffError, ConvGeometry, ParamSet, Primitive, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1], &[0.0])).unwrap();
    let y = tape.apply(Primitive::Sigmoid, &[x]).unwrap();
    assert_eq!(tape.value(y), &[0.5]);
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::new();
    let i = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let m = tape.constant(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
    let y = tape.apply(Primitive::Matmul, &[i, m]).unwrap();
    assert_eq!(tape.value(y), &[3.0, 4.0, 5.0, 6.0]);
    assert_eq!(tape.shape(y), &[2, 2]);
}

#[test]
fn softmax_of_log_weights() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 2], &[1f64.ln(), 3f64.ln()])).unwrap();
    let y = tape.apply(Primitive::SoftmaxRows, &[x]).unwrap();
    let v = tape.value(y);
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rows_positive_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let x = tape.constant(&uniform(&mut rng, &[4, 7], -30.0, 30.0)).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).chunks(7) {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_mismatch_names_the_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[2, 3], &[0.0; 6])).unwrap();
    let b = tape.constant(&t(&[2, 3], &[0.0; 6])).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
    let c = tape.constant(&t(&[2], &[0.0; 2])).unwrap();
    assert!(matches!(tape.add(a, c), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn non_finite_results_rejected() {
    let mut tape = Tape::new();
    let z = tape.constant(&t(&[1], &[0.0])).unwrap();
    assert!(matches!(tape.log(z), Err(AutodiffError::NonFinite { op: "log" })));
    assert!(Tensor::<f64>::new(vec![1], vec![f64::INFINITY]).is_err());
}

#[test]
fn only_differentiable_paths_are_recorded() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[1], &[1.0])).unwrap();
    let b = tape.sigmoid(a).unwrap();
    assert_eq!(tape.recorded_ops(), 0);
    let p = tape.param(&t(&[1], &[1.0])).unwrap();
    tape.add(b, p).unwrap();
    assert_eq!(tape.recorded_ops(), 1);
}

#[test]
fn grad_of_sum_is_ones_and_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6])).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut tape = Tape::new();
    let w = tape.param(&t(&[1, 1], &[0.0])).unwrap();
    let one = tape.constant(&t(&[1, 1], &[1.0])).unwrap();
    let z = tape.matmul(w, one).unwrap();
    let y = tape.sigmoid(z).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert!((tape.grad(w).unwrap()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(AutodiffError::LossNotScalar { .. })));
    let c = tape.constant(&t(&[1], &[1.0])).unwrap();
    assert!(matches!(tape.backward(c), Err(AutodiffError::LossNotReachable)));
    let mut other: Tape<f64> = Tape::new();
    let y = other.param(&t(&[1], &[1.0])).unwrap();
    assert!(matches!(tape.backward(y), Err(AutodiffError::ForeignVar)));
}

#[test]
fn conv_examples() {
    // time axis: in=100, k=11, pad=5, stride=2 → 50
    let geom = ConvGeometry::new((1, 11), (1, 2), (0, 5));
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 1, 100])).unwrap();
    let w = tape.constant(&Tensor::zeros(&[1, 1, 1, 11])).unwrap();
    let b = tape.constant(&t(&[1], &[0.0])).unwrap();
    let y = tape.conv2d(x, w, b, geom).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 50]);

    // zero weights, bias c → constant c
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(&uniform(&mut rng, &[2, 6, 9], -1.0, 1.0)).unwrap();
    let w = tape.constant(&Tensor::zeros(&[3, 2, 3, 3])).unwrap();
    let b = tape.constant(&t(&[3], &[0.7, 0.7, 0.7])).unwrap();
    let y = tape.conv2d(x, w, b, ConvGeometry::new((3, 3), (2, 2), (1, 1))).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.7));

    // 1×1 kernel, weight 2 → 2·input
    let xt = uniform(&mut rng, &[1, 4, 5], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(&xt).unwrap();
    let w = tape.constant(&t(&[1, 1, 1, 1], &[2.0])).unwrap();
    let b = tape.constant(&t(&[1], &[0.0])).unwrap();
    let y = tape.conv2d(x, w, b, ConvGeometry::new((1, 1), (1, 1), (0, 0))).unwrap();
    let doubled: Vec<f64> = xt.values().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.value(y), doubled.as_slice());
}

#[test]
fn conv_kernel_larger_than_input() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 3, 3])).unwrap();
    let w = tape.constant(&Tensor::zeros(&[1, 1, 5, 5])).unwrap();
    let b = tape.constant(&t(&[1], &[0.0])).unwrap();
    let err = tape.conv2d(x, w, b, ConvGeometry::new((5, 5), (1, 1), (0, 0)));
    assert!(matches!(err, Err(AutodiffError::KernelTooLarge { .. })));
}

/// Every primitive (plus conv2d) against central differences, random inputs
/// in [−1, 1], 100 trials each.
#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let kinds: Vec<(&str, f64)> = vec![
        ("add", 1e-5),
        ("add_broadcast", 1e-5),
        ("mul", 1e-5),
        ("matmul", 1e-5),
        ("concat_last_axis", 1e-5),
        ("sigmoid", 1e-5),
        ("tanh", 1e-5),
        ("relu_clipped", 1e-5),
        ("softmax_rows", 1e-5),
        ("log_softmax_rows", 1e-5),
        ("log", 1e-5),
        ("slice", 1e-5),
        ("transpose_reshape", 1e-5),
        ("gather_rows", 1e-5),
        ("normalize_columns", 1e-5),
        ("bce_with_logits", 1e-5),
        ("nll_rows", 1e-5),
        ("conv2d", 1e-4),
    ];
    for (kind, tol) in kinds {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut ps = ParamSet::new();
            let lo = if kind == "log" { 0.1 } else { -1.0 };
            let a = ps.add("a", uniform(&mut rng, &[3, 4], lo, 1.0));
            let b = ps.add("b", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            let m = ps.add("m", uniform(&mut rng, &[4, 2], -1.0, 1.0));
            let r = ps.add("r", uniform(&mut rng, &[4], -1.0, 1.0));
            let x = ps.add("x", uniform(&mut rng, &[2, 5, 6], -1.0, 1.0));
            let w = ps.add("w", uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0));
            let cb = ps.add("cb", uniform(&mut rng, &[3], -1.0, 1.0));
            // Random projection so the scalar loss weighs every output differently.
            let proj = uniform(&mut rng, &[64], -1.0, 1.0);
            let targets: Vec<f64> = (0..12).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let picks: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let report = check_params(&mut ps, 1e-6, |tape, bd| {
                let out = match kind {
                    "add" => tape.add(bd[a], bd[b])?,
                    "add_broadcast" => tape.add(bd[a], bd[r])?,
                    "mul" => tape.mul(bd[a], bd[b])?,
                    "matmul" => tape.matmul(bd[a], bd[m])?,
                    "concat_last_axis" => tape.apply(Primitive::ConcatLastAxis, &[bd[a], bd[b]])?,
                    "sigmoid" => tape.sigmoid(bd[a])?,
                    "tanh" => tape.tanh(bd[a])?,
                    "relu_clipped" => {
                        let s = tape.scale(bd[a], 25.0)?;
                        tape.relu_clipped(s)?
                    }
                    "softmax_rows" => tape.softmax_rows(bd[a])?,
                    "log_softmax_rows" => tape.log_softmax_rows(bd[a])?,
                    "log" => tape.log(bd[a])?,
                    "slice" => tape.apply(Primitive::Slice { axis: 1, start: 1, len: 2 }, &[bd[a]])?,
                    "transpose_reshape" => {
                        let tt = tape.transpose(bd[a])?;
                        tape.reshape(tt, vec![2, 6])?
                    }
                    "gather_rows" => tape.gather_rows(bd[a], &[2, 0, 2])?,
                    "normalize_columns" => tape.normalize_columns(bd[a], 1e-5)?.0,
                    "bce_with_logits" => return tape.bce_with_logits(bd[a], &targets),
                    "nll_rows" => {
                        let lp = tape.log_softmax_rows(bd[a])?;
                        return tape.nll_rows(lp, &picks);
                    }
                    "conv2d" => tape.conv2d(bd[x], bd[w], bd[cb], ConvGeometry::new((3, 3), (2, 1), (1, 1)))?,
                    _ => unreachable!(),
                };
                let n = tape.value(out).len();
                let shape = tape.shape(out).to_vec();
                let wts = tape.constant_from(shape, proj.values()[..n].to_vec())?;
                let y = tape.mul(out, wts)?;
                tape.sum(y)
            })
            .unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst <= tol, "{kind}: max relative error {worst:e} > {tol:e}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ps = ParamSet::new();
        let a = ps.add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
        let m = ps.add("m", uniform(&mut rng, &[4, 4], -1.0, 1.0));
        let mut tape = Tape::new();
        let bd = ps.bind(&mut tape).unwrap();
        let h = tape.matmul(bd[a], bd[m]).unwrap();
        let h = tape.tanh(h).unwrap();
        let h = tape.log_softmax_rows(h).unwrap();
        let l = tape.sum(h).unwrap();
        tape.backward(l).unwrap();
        ps.accumulate_grads(&tape, &bd);
        (
            tape.value(l).to_vec(),
            ps.get(a).grad().unwrap().to_vec(),
            ps.get(m).grad().unwrap().to_vec(),
        )
    };
    let (l1, ga1, gm1) = run();
    let (l2, ga2, gm2) = run();
    assert_eq!(l1[0].to_bits(), l2[0].to_bits());
    assert!(ga1.iter().zip(&ga2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(gm1.iter().zip(&gm2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn tape_runs_in_single_precision() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape
        .param(&Tensor::new(vec![1, 2], vec![0.0f32, 1.0]).unwrap())
        .unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let l = tape.log(y).unwrap();
    let s = tape.sum(l).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    // d/dx Σ log softmax = 1 − 2·softmax
    let p0 = 1.0 / (1.0 + 1f32.exp());
    assert!((g[0] - (1.0 - 2.0 * p0)).abs() < 1e-6);
}
